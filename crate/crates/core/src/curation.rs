//! Measurement-based cohort curation: robust per-structure MAD filtering of
//! log-volumes, then low-rank inter-structure consistency flags per scan.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Normal-consistency factor for the MAD.
pub const MAD_SCALE: f64 = 1.4826;
/// IQR of the standard normal.
const IQR_SCALE: f64 = 1.349;

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn quartiles(v: &mut [f64]) -> (f64, f64) {
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (v.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(v.len() - 1);
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    (q(0.25), q(0.75))
}

/// Robust center and scale: median and 1.4826·MAD, falling back to
/// IQR/1.349 when the MAD is 0. Scale 0 means no spread at all.
pub fn robust_location_scale(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let mut v = values.to_vec();
    let med = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    let mad = median(&mut dev);
    if mad > 0.0 {
        return (med, MAD_SCALE * mad);
    }
    let (q1, q3) = quartiles(&mut v);
    (med, (q3 - q1) / IQR_SCALE)
}

/// Flags values whose robust z-score exceeds `k` (strictly).
pub fn mad_filter(values: &[f64], k: f64) -> Result<Vec<bool>> {
    if !(k > 0.0) {
        return Err(Error::Contract(format!(
            "MAD threshold must be positive, got {k}"
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("MAD filter input {v} is not finite")));
    }
    let (med, scale) = robust_location_scale(values);
    if scale == 0.0 {
        return Ok(vec![false; values.len()]);
    }
    Ok(values.iter().map(|x| (x - med).abs() / scale > k).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LowRankOptions {
    pub rank: usize,
    pub threshold: f64,
    pub min_observed: usize,
    pub ridge: f64,
    pub max_sweeps: usize,
    pub tolerance: f64,
}

impl Default for LowRankOptions {
    fn default() -> Self {
        Self {
            rank: 5,
            threshold: 4.0,
            min_observed: 8,
            ridge: 1e-6,
            max_sweeps: 2000,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankResult {
    pub flags: Vec<bool>,
    /// RMS of standardized residuals per scan (`None` below `min_observed`).
    pub rms: Vec<Option<f64>>,
    /// Raw residuals (`None` where missing).
    pub residuals: Vec<Vec<Option<f64>>>,
    /// Masked Frobenius loss plus ridge after each sweep.
    pub objective_trace: Vec<f64>,
}

fn als_objective(x: &[Vec<Option<f64>>], u: &DMatrix<f64>, v: &DMatrix<f64>, ridge: f64) -> f64 {
    let mut s = 0.0;
    for (i, row) in x.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            if let Some(val) = e {
                s += (val - u.row(i).dot(&v.row(j))).powi(2);
            }
        }
    }
    s + ridge * (u.norm_squared() + v.norm_squared())
}

/// Ridge least squares for one factor row given the other factor.
fn solve_row(
    other: &DMatrix<f64>,
    entries: impl Iterator<Item = (usize, f64)>,
    rank: usize,
    ridge: f64,
) -> DVector<f64> {
    let mut a = DMatrix::<f64>::identity(rank, rank) * ridge;
    let mut b = DVector::<f64>::zeros(rank);
    for (j, val) in entries {
        let o = other.row(j).transpose();
        a += &o * o.transpose();
        b += o * val;
    }
    a.cholesky()
        .map(|c| c.solve(&b))
        .unwrap_or_else(|| DVector::zeros(rank))
}

/// Rank-`r` alternating least squares on the observed entries of a
/// scans × structures matrix; flags scans whose standardized residuals are
/// inconsistent with the learned inter-structure dependencies.
pub fn lowrank_flags(x: &[Vec<Option<f64>>], opts: &LowRankOptions) -> Result<LowRankResult> {
    if opts.rank == 0 {
        return Err(Error::Contract("rank must be at least 1".into()));
    }
    let n = x.len();
    let m = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != m) {
        return Err(Error::Contract(
            "all rows must have the same number of structures".into(),
        ));
    }
    if x.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain("matrix entries must be finite".into()));
    }
    let r = opts.rank.min(m.max(1)).min(n.max(1));
    // Start from the SVD of the column-mean-imputed matrix.
    let mut means = vec![0.0; m];
    for j in 0..m {
        let obs: Vec<f64> = x.iter().filter_map(|row| row[j]).collect();
        means[j] = if obs.is_empty() {
            0.0
        } else {
            obs.iter().sum::<f64>() / obs.len() as f64
        };
    }
    let filled = DMatrix::from_fn(n, m, |i, j| x[i][j].unwrap_or(means[j]));
    let svd = filled.svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let (su, svt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut u = DMatrix::from_fn(n, r, |i, k| {
        su[(i, order[k])] * svd.singular_values[order[k]].sqrt()
    });
    let mut v = DMatrix::from_fn(m, r, |j, k| {
        svt[(order[k], j)] * svd.singular_values[order[k]].sqrt()
    });

    let mut trace = vec![als_objective(x, &u, &v, opts.ridge)];
    let mut converged = false;
    for _ in 0..opts.max_sweeps {
        for i in 0..n {
            let row = solve_row(
                &v,
                x[i].iter()
                    .enumerate()
                    .filter_map(|(j, e)| e.map(|val| (j, val))),
                r,
                opts.ridge,
            );
            u.set_row(i, &row.transpose());
        }
        for j in 0..m {
            let col = solve_row(
                &u,
                x.iter()
                    .enumerate()
                    .filter_map(|(i, row)| row[j].map(|val| (i, val))),
                r,
                opts.ridge,
            );
            v.set_row(j, &col.transpose());
        }
        let obj = als_objective(x, &u, &v, opts.ridge);
        let prev = *trace.last().expect("nonempty");
        trace.push(obj);
        if prev - obj <= opts.tolerance * prev.max(1e-300) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations: opts.max_sweeps,
            gradient_norm: trace.last().copied().unwrap_or(f64::NAN),
            best: None,
        });
    }

    let residuals: Vec<Vec<Option<f64>>> = x
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, e)| e.map(|val| val - u.row(i).dot(&v.row(j))))
                .collect()
        })
        .collect();
    let mut center = vec![0.0; m];
    let mut scale = vec![1.0; m];
    for j in 0..m {
        let col: Vec<f64> = residuals.iter().filter_map(|row| row[j]).collect();
        let vals: Vec<f64> = x.iter().filter_map(|row| row[j]).collect();
        let magnitude = vals.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
        let (c, s) = robust_location_scale(&col);
        center[j] = if c.is_finite() { c } else { 0.0 };
        // Exact fits leave only rounding noise; keep it from being amplified.
        scale[j] = s.max(1e-8 * magnitude);
    }
    let mut flags = vec![false; n];
    let mut rms = vec![None; n];
    for i in 0..n {
        let z: Vec<f64> = residuals[i]
            .iter()
            .enumerate()
            .filter_map(|(j, e)| e.map(|r| (r - center[j]) / scale[j]))
            .collect();
        if z.len() < opts.min_observed {
            continue;
        }
        let value = (z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64).sqrt();
        rms[i] = Some(value);
        flags[i] = value > opts.threshold;
    }
    Ok(LowRankResult {
        flags,
        rms,
        residuals,
        objective_trace: trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurationFlag {
    Kept,
    MadOutlier,
    ConsistencyOutlier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationParams {
    pub mad_k: f64,
    pub lowrank: LowRankOptions,
}

impl Default for CurationParams {
    fn default() -> Self {
        Self {
            mad_k: 4.0,
            lowrank: LowRankOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFlag {
    pub scan_id: String,
    pub structure_id: String,
    pub flag: CurationFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub params: CurationParams,
    /// One entry per input record carrying a volume, in input order.
    pub records: Vec<RecordFlag>,
    pub kept: usize,
    pub mad_outliers: usize,
    pub consistency_outliers: usize,
    /// Scans flagged by the consistency stage.
    pub flagged_scans: Vec<String>,
}

impl CurationReport {
    pub fn input(&self) -> usize {
        self.records.len()
    }

    pub fn is_kept(&self, scan_id: &str, structure_id: &str) -> bool {
        self.records.iter().any(|r| {
            r.scan_id == scan_id && r.structure_id == structure_id && r.flag == CurationFlag::Kept
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scan_id", "structure_id", "flag"])?;
        for r in &self.records {
            let flag = match r.flag {
                CurationFlag::Kept => "kept",
                CurationFlag::MadOutlier => "mad_outlier",
                CurationFlag::ConsistencyOutlier => "consistency_outlier",
            };
            w.write_record([r.scan_id.as_str(), r.structure_id.as_str(), flag])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Stage 1 flags (scan, structure) pairs by MAD on log-volume per
/// structure; stage 2 flags whole scans by low-rank consistency of the
/// remaining log-volumes.
pub fn curate(data: &Dataset, params: &CurationParams) -> Result<CurationReport> {
    let rows: Vec<usize> = (0..data.records.len())
        .filter(|&i| data.records[i].volume_ml.is_some())
        .collect();
    let mut by_structure: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in &rows {
        by_structure
            .entry(data.records[i].structure_id.as_str())
            .or_default()
            .push(i);
    }
    let mut mad_flag = vec![false; data.records.len()];
    for idx in by_structure.values() {
        let logs: Vec<f64> = idx
            .iter()
            .map(|&i| data.records[i].volume_ml.expect("filtered").ln())
            .collect();
        for (&i, f) in idx.iter().zip(mad_filter(&logs, params.mad_k)?) {
            mad_flag[i] = f;
        }
    }

    let mut scans: Vec<&str> = rows
        .iter()
        .map(|&i| data.records[i].scan_id.as_str())
        .collect();
    scans.sort_unstable();
    scans.dedup();
    let structures: Vec<&str> = by_structure.keys().copied().collect();
    let mut matrix = vec![vec![None; structures.len()]; scans.len()];
    for &i in &rows {
        if mad_flag[i] {
            continue;
        }
        let r = &data.records[i];
        let si = scans.binary_search(&r.scan_id.as_str()).expect("collected");
        let sj = structures
            .binary_search(&r.structure_id.as_str())
            .expect("collected");
        matrix[si][sj] = Some(r.volume_ml.expect("filtered").ln());
    }
    let scan_flags = if scans.is_empty() || structures.is_empty() {
        vec![false; scans.len()]
    } else {
        lowrank_flags(&matrix, &params.lowrank)?.flags
    };

    let mut records = Vec::with_capacity(rows.len());
    let (mut kept, mut mad, mut cons) = (0, 0, 0);
    for &i in &rows {
        let r = &data.records[i];
        let si = scans.binary_search(&r.scan_id.as_str()).expect("collected");
        let flag = if mad_flag[i] {
            mad += 1;
            CurationFlag::MadOutlier
        } else if scan_flags[si] {
            cons += 1;
            CurationFlag::ConsistencyOutlier
        } else {
            kept += 1;
            CurationFlag::Kept
        };
        records.push(RecordFlag {
            scan_id: r.scan_id.clone(),
            structure_id: r.structure_id.clone(),
            flag,
        });
    }
    let flagged_scans = scans
        .iter()
        .zip(&scan_flags)
        .filter(|(_, f)| **f)
        .map(|(s, _)| s.to_string())
        .collect();
    Ok(CurationReport {
        params: params.clone(),
        records,
        kept,
        mad_outliers: mad,
        consistency_outliers: cons,
        flagged_scans,
    })
}
