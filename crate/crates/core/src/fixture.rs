//! Bundled synthetic cohort: three structures, two studies, 400 scans, a
//! scripted report corpus with five recorded extractor backends, and a
//! ready-to-run pipeline configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{write_csv, MeasurementRecord, Sex};
use crate::dist::FamilyParams;
use crate::error::Result;
use crate::reports::{build_tasks, consensus_partition, parse_stage1};
use crate::reports::{
    label_sets_csv, stage1_request, verify_request, AbnormalitySet, FixtureBackend, Registry,
    Report, TargetId,
};

pub const MODELS: [&str; 5] = ["model-a", "model-b", "model-c", "model-d", "model-e"];

struct Organ {
    structure: &'static str,
    log_volume: f64,
    hu: f64,
    hu_contrast: f64,
    abnormal: &'static str,
    normal: &'static str,
}

const ORGANS: [Organ; 3] = [
    Organ {
        structure: "liver",
        log_volume: 7.3,
        hu: 58.0,
        hu_contrast: 45.0,
        abnormal: "Multiple hypodense lesions in the liver consistent with metastases.",
        normal: "The liver is of normal size without focal lesions.",
    },
    Organ {
        structure: "spleen",
        log_volume: 5.2,
        hu: 48.0,
        hu_contrast: 70.0,
        abnormal: "The spleen is enlarged measuring 16 cm.",
        normal: "The spleen is unremarkable.",
    },
    Organ {
        structure: "kidney_left",
        log_volume: 5.0,
        hu: 32.0,
        hu_contrast: 110.0,
        abnormal: "Large simple cyst in the left kidney.",
        normal: "Both kidneys are normal in size and enhancement.",
    },
];

const FILLER: [&str; 3] = [
    "No free fluid.",
    "Atherosclerotic calcification of the aorta.",
    "No pleural effusion.",
];

#[derive(Debug, Clone)]
pub struct Fixture {
    pub records: Vec<MeasurementRecord>,
    pub reports: Vec<Report>,
    pub labels: Vec<AbnormalitySet>,
    pub backends: Vec<FixtureBackend>,
}

struct Scan {
    id: String,
    abnormal: Vec<usize>,
}

fn report_text(scan: &Scan, idx: usize) -> String {
    let mut s = vec!["Findings:".to_string()];
    for (k, o) in ORGANS.iter().enumerate() {
        s.push(
            if scan.abnormal.contains(&k) {
                o.abnormal
            } else {
                o.normal
            }
            .to_string(),
        );
    }
    s.push(FILLER[idx % FILLER.len()].to_string());
    s.join("\n")
}

fn record(
    target: TargetId,
    name: &str,
    report_name: &str,
    evidence: &str,
    status: Option<&str>,
) -> serde_json::Value {
    let mut v = serde_json::json!({
        "structure_id": target,
        "canonical_name": name,
        "report_name": report_name,
        "evidence": evidence,
    });
    if let Some(s) = status {
        v["status"] = s.into();
    }
    v
}

/// Scripted Stage-1 output of model `m` on report number `idx`.
fn stage1_output(m: usize, idx: usize, scan: &Scan, registry: &Registry) -> String {
    if m == 2 && idx % 13 == 5 {
        return "I could not parse this report.".into();
    }
    let mut out = Vec::new();
    for (k, o) in ORGANS.iter().enumerate() {
        let target = registry
            .target_of(o.structure)
            .expect("fixture structures are registered");
        let name = &registry.get(target).expect("registered").canonical_name;
        if scan.abnormal.contains(&k) {
            if !(idx + 2 * m + k).is_multiple_of(6) {
                let evidence = if m == 4 && idx % 5 == 1 {
                    format!("{} (paraphrased)", o.abnormal)
                } else {
                    o.abnormal.to_string()
                };
                out.push(record(target, name, o.structure, &evidence, None));
            }
        } else if (3 * idx + m + k).is_multiple_of(9) {
            out.push(record(target, name, o.structure, o.normal, None));
        } else if m == 3 && (idx + k).is_multiple_of(4) {
            out.push(record(target, name, o.structure, o.normal, Some("normal")));
        }
    }
    if idx % 3 == 1 && (m + idx).is_multiple_of(2) {
        let aorta = registry.target_of("aorta").expect("registered");
        out.push(record(aorta, "aorta", "aorta", FILLER[1], Some("abnormal")));
    }
    serde_json::to_string(&out).expect("json")
}

fn volume_sample(rng: &mut ChaCha8Rng, log_mu: f64) -> Result<f64> {
    Ok(FamilyParams::gg(log_mu.exp(), 0.12, 0.8)?.sample_with(rng, 1)[0])
}

fn hu_sample(rng: &mut ChaCha8Rng, mu: f64) -> Result<f64> {
    Ok(FamilyParams::st1(mu, 8.0, 0.8, 4.0)?.sample_with(rng, 1)[0])
}

/// Deterministic bundled fixture.
pub fn bundled() -> Result<Fixture> {
    let registry = Registry::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let mut records = Vec::new();
    let mut scans = Vec::new();
    let mut reports = Vec::new();
    let mut labels = Vec::new();
    let (subjects, repeat) = (280, 120);
    for s in 0..subjects {
        let study = if s % 2 == 0 { "studyA" } else { "studyB" };
        let sex = if rng.random_bool(0.5) { Sex::M } else { Sex::F };
        let age_b: f64 = rng.random_range(22.0..85.0);
        let b: f64 = 0.08 * rng.sample::<f64, _>(StandardNormal);
        let b_hu: f64 = 4.0 * rng.sample::<f64, _>(StandardNormal);
        let n_scans = if s < repeat { 2 } else { 1 };
        let mut t = 0.0;
        for j in 0..n_scans {
            if j > 0 {
                t += rng.random_range(1.0..4.0);
            }
            let age = age_b + t;
            let scan = format!("scan{:03}", scans.len());
            let manufacturer = if rng.random_bool(0.6) {
                "Siemens"
            } else {
                "GE"
            };
            let kvp = if rng.random_bool(0.7) { 120.0 } else { 100.0 };
            let contrast = rng.random_bool(0.5);
            let abnormal: Vec<usize> = (0..ORGANS.len())
                .filter(|_| rng.random_bool(0.08))
                .collect();
            let male = if sex == Sex::M { 1.0 } else { 0.0 };
            for (k, o) in ORGANS.iter().enumerate() {
                let x = age / 10.0;
                let study_shift = if study == "studyA" { 0.02 } else { -0.02 };
                let log_mu = o.log_volume + 0.2 * male + 0.35 * x.sqrt() - 0.012 * x * x
                    + study_shift
                    + 0.02 * f64::from(u8::from(contrast))
                    + b
                    - 0.006 * t;
                let mut volume = volume_sample(&mut rng, log_mu)?;
                let base = if contrast { o.hu + o.hu_contrast } else { o.hu };
                let mu = base - 0.18 * age - 1.5 * male - 0.15 * (kvp - 120.0)
                    + if manufacturer == "GE" { 2.0 } else { 0.0 }
                    + b_hu;
                let mut hu = hu_sample(&mut rng, mu)?;
                if abnormal.contains(&k) {
                    volume *= 1.8;
                    hu -= 25.0;
                }
                if scans.len() == 77 && k == 1 {
                    volume *= 60.0;
                }
                records.push(MeasurementRecord {
                    scan_id: scan.clone(),
                    subject_id: format!("subj{s:03}"),
                    study: study.into(),
                    date: None,
                    age,
                    sex,
                    manufacturer: manufacturer.into(),
                    kvp: Some(kvp),
                    contrast,
                    structure_id: o.structure.into(),
                    volume_ml: Some(volume),
                    mean_hu: Some(hu),
                });
            }
            scans.push(Scan { id: scan, abnormal });
        }
    }

    let mut backends: Vec<FixtureBackend> =
        MODELS.iter().map(|m| FixtureBackend::new(*m)).collect();
    for (idx, scan) in scans.iter().enumerate().filter(|(i, _)| i % 4 == 0) {
        let report = Report {
            report_id: scan.id.clone(),
            language: if idx % 8 == 0 { "de" } else { "en" }.into(),
            text: report_text(scan, idx),
        };
        let mut per_model = Vec::new();
        let mut stage1 = Vec::new();
        for (m, backend) in backends.iter_mut().enumerate() {
            let raw = stage1_output(m, idx, scan, &registry);
            backend.record(
                &stage1_request(backend.name.as_str(), &report, &registry),
                raw.clone(),
            );
            let (recs, _) = parse_stage1(raw.as_bytes(), &report.text, &registry);
            stage1.push(AbnormalitySet::from_records(&report.report_id, &recs));
            per_model.push(recs);
        }
        let consensus = consensus_partition(&stage1, registry.ids())?;
        for task in build_tasks(&per_model, &consensus.disputed, &registry) {
            let truly = task
                .pooled_evidence
                .iter()
                .any(|e| ORGANS.iter().any(|o| o.abnormal == e) || e == FILLER[1]);
            for (m, backend) in backends.iter_mut().enumerate() {
                // model-b affirms everything; model-d fails on some tasks.
                if m == 3 && (idx + task.target_id as usize).is_multiple_of(10) {
                    continue;
                }
                let verdict = if m == 1 { true } else { truly };
                backend.record(
                    &verify_request(backend.name.as_str(), &task),
                    format!("{{\"abnormal\": {verdict}}}"),
                );
            }
        }
        let mut truth: BTreeSet<TargetId> = scan
            .abnormal
            .iter()
            .map(|&k| registry.target_of(ORGANS[k].structure).expect("registered"))
            .collect();
        if report.text.contains(FILLER[1]) {
            truth.insert(registry.target_of("aorta").expect("registered"));
        }
        labels.push(AbnormalitySet {
            report_id: report.report_id.clone(),
            targets: truth,
        });
        reports.push(report);
    }
    Ok(Fixture {
        records,
        reports,
        labels,
        backends,
    })
}

pub const CONFIG: &str = r#"seed = 7

[input]
measurements = "measurements.csv"
reports = "reports.csv"
labels = "labels.csv"

[stages]
curate = true
filter_reports = true
fit = true
bootstrap = true
chart = true
score = true
longitudinal = true

[curation]
mad_k = 4.0

[curation.lowrank]
rank = 1
threshold = 4.0
min_observed = 3

[report_filter]
undecided = "abnormal"
extractors = [
  { name = "model-a", fixture = "backends/model-a.json" },
  { name = "model-b", fixture = "backends/model-b.json" },
  { name = "model-c", fixture = "backends/model-c.json" },
  { name = "model-d", fixture = "backends/model-d.json" },
  { name = "model-e", fixture = "backends/model-e.json" },
]
verifiers = [
  { name = "model-e", fixture = "backends/model-e.json" },
  { name = "model-a", fixture = "backends/model-a.json" },
  { name = "model-b", fixture = "backends/model-b.json" },
  { name = "model-c", fixture = "backends/model-c.json" },
  { name = "model-d", fixture = "backends/model-d.json" },
]

[fit]
select = true
max_degree_mu = 1
max_degree_sigma = 1

[bootstrap]
replicates = 20

[chart]
age_from = 25.0
age_to = 85.0
age_step = 5.0
"#;

/// Writes the fixture and its pipeline configuration under `dir`; returns
/// the configuration path.
pub fn write_bundled(dir: &Path) -> Result<PathBuf> {
    let fx = bundled()?;
    std::fs::create_dir_all(dir.join("backends"))?;
    let mut f = std::fs::File::create(dir.join("measurements.csv"))?;
    write_csv(&mut f, &fx.records)?;
    let mut w = csv::Writer::from_path(dir.join("reports.csv"))?;
    for r in &fx.reports {
        w.serialize(r)?;
    }
    w.flush()?;
    std::fs::write(dir.join("labels.csv"), label_sets_csv(&fx.labels)?)?;
    for b in &fx.backends {
        std::fs::write(
            dir.join("backends").join(format!("{}.json", b.name)),
            b.to_json()?,
        )?;
    }
    let path = dir.join("pipeline.toml");
    std::fs::write(&path, CONFIG)?;
    Ok(path)
}
