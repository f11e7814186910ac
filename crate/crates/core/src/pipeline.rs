//! End-to-end run: curate → filter-reports → fit → bootstrap → chart →
//! score (→ longitudinal), writing a deterministic output tree.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::artifact::{data_hash, load_artifact, save_artifact, ModelArtifact, Provenance};
use crate::centile::{age_grid, chart_grid, score, CovariateProfile, DEFAULT_CENTILES};
use crate::curation::{curate, CurationFlag, CurationParams};
use crate::data::{ingest_csv, Dataset, MeasurementRecord, SchemaConfig, Sex};
use crate::engine::{
    bootstrap_ci, fit, replicate_seed, select_fp_with, BootstrapOptions, ModelSpec, Observation,
    Response, SelectOptions, StudyEffectMode,
};
use crate::error::{Error, Result};
use crate::fp::PowerSet;
use crate::longitudinal::{
    coefficients_csv, decompose_age, fit_long_hu, fit_long_volume, model_coefficients,
};
use crate::reports::{
    agreement_metrics, label_sets_csv, method_sets, parse_corpus, parse_label_sets, FixtureBackend,
    HttpBackend, ModelBackend, Registry, ReportFilter, UndecidedPolicy,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub measurements: PathBuf,
    pub schema: SchemaConfig,
    pub reports: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Registry CSV; the bundled registry when absent.
    pub registry: Option<PathBuf>,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            measurements: "measurements.csv".into(),
            schema: SchemaConfig::default(),
            reports: None,
            labels: None,
            registry: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub curate: bool,
    pub filter_reports: bool,
    pub fit: bool,
    pub bootstrap: bool,
    pub chart: bool,
    pub score: bool,
    pub longitudinal: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            curate: true,
            filter_reports: true,
            fit: true,
            bootstrap: true,
            chart: true,
            score: true,
            longitudinal: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub name: String,
    /// Recorded responses (JSON) to replay.
    pub fixture: Option<PathBuf>,
    /// OpenAI-compatible base URL.
    pub url: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportFilterConfig {
    pub extractors: Vec<BackendConfig>,
    pub verifiers: Vec<BackendConfig>,
    pub undecided: UndecidedPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Select FP powers by BIC; otherwise use the powers below.
    pub select: bool,
    pub max_degree_mu: usize,
    pub max_degree_sigma: usize,
    pub powers_mu: Vec<f64>,
    pub powers_sigma: Vec<f64>,
    pub study_effect_mode: StudyEffectMode,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            select: true,
            max_degree_mu: 2,
            max_degree_sigma: 2,
            powers_mu: vec![1.0],
            powers_sigma: Vec::new(),
            study_effect_mode: StudyEffectMode::PenalizedRandom,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub max_failure_rate: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 200,
            max_failure_rate: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChartConfig {
    pub age_from: f64,
    pub age_to: f64,
    pub age_step: f64,
    pub centiles: Vec<f64>,
}

impl Default for ChartConfig {
    fn default() -> Self {
        Self {
            age_from: 20.0,
            age_to: 90.0,
            age_step: 1.0,
            centiles: DEFAULT_CENTILES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LongitudinalConfig {
    pub alpha: f64,
}

impl Default for LongitudinalConfig {
    fn default() -> Self {
        Self { alpha: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    /// Skip stages recorded as complete in an existing checkpoint.
    pub resume: bool,
    pub input: InputConfig,
    pub stages: Stages,
    pub curation: CurationParams,
    pub report_filter: ReportFilterConfig,
    pub fit: FitConfig,
    pub bootstrap: BootstrapConfig,
    pub chart: ChartConfig,
    pub longitudinal: LongitudinalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: None,
            resume: false,
            input: InputConfig::default(),
            stages: Stages::default(),
            curation: CurationParams::default(),
            report_filter: ReportFilterConfig::default(),
            fit: FitConfig::default(),
            bootstrap: BootstrapConfig::default(),
            chart: ChartConfig::default(),
            longitudinal: LongitudinalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("pipeline config: {e}")))
    }

    /// Reads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.input.measurements);
        for p in [
            &mut cfg.input.reports,
            &mut cfg.input.labels,
            &mut cfg.input.registry,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for b in cfg
            .report_filter
            .extractors
            .iter_mut()
            .chain(cfg.report_filter.verifiers.iter_mut())
        {
            if let Some(p) = b.fixture.as_mut() {
                fix(p);
            }
        }
        Ok(cfg)
    }
}

pub const STAGE_NAMES: [&str; 7] = [
    "curate",
    "filter-reports",
    "fit",
    "bootstrap",
    "chart",
    "score",
    "longitudinal",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub completed: Vec<String>,
    pub failed: Option<FailedStage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedStage {
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub measurement_records: usize,
    pub curation_excluded_records: usize,
    pub report_excluded_records: usize,
    pub reference_cohort_records: usize,
    pub reports_processed: usize,
    pub models: Vec<String>,
    pub stages_run: Vec<String>,
    pub stages_skipped: Vec<String>,
}

/// One fitted model: structure, response and (for HU) contrast state.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct FitKey {
    pub structure: String,
    pub response: Response,
    pub contrast: Option<bool>,
}

impl FitKey {
    pub fn name(&self) -> String {
        let safe: String = self
            .structure
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        match (self.response, self.contrast) {
            (Response::VolumeMl, _) => format!("{safe}__volume"),
            (Response::MeanHu, Some(true)) => format!("{safe}__hu_contrast"),
            (Response::MeanHu, _) => format!("{safe}__hu_noncontrast"),
        }
    }

    fn matches(&self, r: &MeasurementRecord) -> bool {
        r.structure_id == self.structure
            && self.contrast.is_none_or(|c| r.contrast == c)
            && r.response(self.response).is_some()
    }
}

type Excluded = BTreeMap<(String, String), String>;

struct Run<'a> {
    cfg: &'a PipelineConfig,
    out: &'a Path,
    checkpoint: Checkpoint,
    summary: RunSummary,
    data: Dataset,
    /// (scan, structure) → reason, from curation then reports.
    excluded: Excluded,
    models: Vec<(FitKey, ModelArtifact)>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

fn read_exclusions(path: &Path) -> Result<Excluded> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Excluded::new();
    for row in rdr.records() {
        let row = row?;
        let get = |i: usize| row.get(i).unwrap_or_default().to_string();
        out.insert((get(0), get(1)), get(2));
    }
    Ok(out)
}

fn backend(b: &BackendConfig) -> Result<Arc<dyn ModelBackend>> {
    match (&b.fixture, &b.url) {
        (Some(path), None) => {
            let mut f = FixtureBackend::from_json(&fs::read(path)?)?;
            f.name = b.name.clone();
            Ok(Arc::new(f))
        }
        (None, Some(url)) => Ok(Arc::new(HttpBackend::new(
            &b.name,
            url,
            Duration::from_secs(b.timeout_secs),
        ))),
        _ => Err(Error::Contract(format!(
            "backend {} needs exactly one of `fixture` or `url`",
            b.name
        ))),
    }
}

fn seed_for(master: u64, stage: usize, item: usize) -> u64 {
    replicate_seed(replicate_seed(master, stage), item)
}

impl Run<'_> {
    fn done(&self, stage: &str) -> bool {
        self.cfg.resume && self.checkpoint.completed.iter().any(|s| s == stage)
    }

    fn save_checkpoint(&self) -> Result<()> {
        write(
            &self.out.join("checkpoint.json"),
            to_json(&self.checkpoint)?,
        )
    }

    fn stage(
        &mut self,
        name: &str,
        enabled: bool,
        f: impl FnOnce(&mut Self, bool) -> Result<()>,
    ) -> Result<()> {
        if !enabled {
            self.summary.stages_skipped.push(name.to_string());
            return Ok(());
        }
        let resumed = self.done(name);
        match f(self, resumed) {
            Ok(()) => {
                if !self.checkpoint.completed.iter().any(|s| s == name) {
                    self.checkpoint.completed.push(name.to_string());
                }
                self.checkpoint.failed = None;
                self.summary.stages_run.push(name.to_string());
                self.save_checkpoint()
            }
            Err(e) => {
                self.checkpoint.failed = Some(FailedStage {
                    stage: name.to_string(),
                    error: e.to_string(),
                });
                self.save_checkpoint()?;
                Err(e)
            }
        }
    }

    fn curate(&mut self, resumed: bool) -> Result<()> {
        let audit = self.out.join("audit/curation_exclusions.csv");
        if resumed {
            self.excluded.extend(read_exclusions(&audit)?);
            return Ok(());
        }
        let report = curate(&self.data, &self.cfg.curation)?;
        write(&self.out.join("curation/records.csv"), report.to_csv()?)?;
        write(
            &self.out.join("curation/excluded_scans.txt"),
            report
                .flagged_scans
                .iter()
                .map(|s| format!("{s}\n"))
                .collect::<String>(),
        )?;
        #[derive(Serialize)]
        struct Summary<'a> {
            params: &'a CurationParams,
            input: usize,
            kept: usize,
            mad_outliers: usize,
            consistency_outliers: usize,
            flagged_scans: usize,
        }
        let s = Summary {
            params: &report.params,
            input: report.input(),
            kept: report.kept,
            mad_outliers: report.mad_outliers,
            consistency_outliers: report.consistency_outliers,
            flagged_scans: report.flagged_scans.len(),
        };
        write(&self.out.join("curation/summary.json"), to_json(&s)?)?;
        let mut rows = Vec::new();
        for r in &report.records {
            let reason = match r.flag {
                CurationFlag::Kept => continue,
                CurationFlag::MadOutlier => "mad_outlier",
                CurationFlag::ConsistencyOutlier => "consistency_outlier",
            };
            rows.push(vec![
                r.scan_id.clone(),
                r.structure_id.clone(),
                reason.to_string(),
            ]);
            self.excluded.insert(
                (r.scan_id.clone(), r.structure_id.clone()),
                reason.to_string(),
            );
        }
        write(
            &audit,
            csv_string(&["scan_id", "structure_id", "reason"], rows)?,
        )
    }

    fn filter_reports(&mut self, resumed: bool) -> Result<()> {
        let audit = self.out.join("audit/report_exclusions.csv");
        if resumed {
            self.excluded.extend(read_exclusions(&audit)?);
            return Ok(());
        }
        let Some(corpus_path) = &self.cfg.input.reports else {
            return Err(Error::Contract(
                "report filtering is enabled but no report corpus is configured".into(),
            ));
        };
        let registry = match &self.cfg.input.registry {
            Some(p) => Registry::parse(&fs::read_to_string(p)?)?,
            None => Registry::bundled(),
        };
        let corpus = parse_corpus(&fs::read(corpus_path)?)?;
        let rf = &self.cfg.report_filter;
        let filter = ReportFilter {
            registry: registry.clone(),
            extractors: rf.extractors.iter().map(backend).collect::<Result<_>>()?,
            verifiers: rf.verifiers.iter().map(backend).collect::<Result<_>>()?,
            policy: rf.undecided,
        };
        let outcomes = filter.run(&corpus)?;
        self.summary.reports_processed = outcomes.len();

        let finals: Vec<_> = outcomes.iter().map(|o| o.final_set().clone()).collect();
        write(
            &self.out.join("reports/final_sets.csv"),
            label_sets_csv(&finals)?,
        )?;
        let mut log = String::new();
        for o in &outcomes {
            log.push_str(&serde_json::to_string(o)?);
            log.push('\n');
        }
        write(&self.out.join("reports/audit.jsonl"), log)?;

        let names = |v: &[BackendConfig]| v.iter().map(|b| b.name.clone()).collect::<Vec<_>>();
        let methods = method_sets(&outcomes, &names(&rf.extractors), &names(&rf.verifiers));
        if methods.len() >= 2 {
            let labels = match &self.cfg.input.labels {
                Some(p) => Some(parse_label_sets(&fs::read(p)?)?),
                None => None,
            };
            let stage1: Vec<_> = methods.iter().take(rf.extractors.len()).cloned().collect();
            #[derive(Serialize)]
            struct Metrics {
                stage1_agreement: Option<crate::reports::AgreementMetrics>,
                methods: crate::reports::AgreementMetrics,
                mean_retention: f64,
            }
            let retention: Vec<f64> = outcomes
                .iter()
                .map(|o| o.verifications[0].retention())
                .filter(|r| r.is_finite())
                .collect();
            let m = Metrics {
                stage1_agreement: if stage1.len() >= 2 {
                    Some(agreement_metrics(&stage1, None)?)
                } else {
                    None
                },
                methods: agreement_metrics(&methods, labels.as_deref())?,
                mean_retention: if retention.is_empty() {
                    f64::NAN
                } else {
                    retention.iter().sum::<f64>() / retention.len() as f64
                },
            };
            write(&self.out.join("reports/metrics.json"), to_json(&m)?)?;
        }

        let abnormal: BTreeMap<&str, &BTreeSet<u32>> = finals
            .iter()
            .map(|s| (s.report_id.as_str(), &s.targets))
            .collect();
        let mut rows = Vec::new();
        for r in &self.data.records {
            let key = (r.scan_id.clone(), r.structure_id.clone());
            if self.excluded.contains_key(&key) {
                continue;
            }
            let (Some(targets), Some(t)) = (
                abnormal.get(r.scan_id.as_str()),
                registry.target_of(&r.structure_id),
            ) else {
                continue;
            };
            if targets.contains(&t) {
                rows.push(vec![
                    key.0.clone(),
                    key.1.clone(),
                    format!("report_abnormal_target_{t}"),
                ]);
                self.excluded
                    .insert(key, format!("report_abnormal_target_{t}"));
            }
        }
        write(
            &audit,
            csv_string(&["scan_id", "structure_id", "reason"], rows)?,
        )
    }

    fn cohort(&self) -> Vec<&MeasurementRecord> {
        self.data
            .records
            .iter()
            .filter(|r| {
                !self
                    .excluded
                    .contains_key(&(r.scan_id.clone(), r.structure_id.clone()))
            })
            .collect()
    }

    fn fit_keys(&self) -> Vec<FitKey> {
        let mut keys = Vec::new();
        for s in self.data.structures() {
            let recs: Vec<&MeasurementRecord> = self.data.for_structure(&s).collect();
            if recs.iter().any(|r| r.volume_ml.is_some()) {
                keys.push(FitKey {
                    structure: s.clone(),
                    response: Response::VolumeMl,
                    contrast: None,
                });
            }
            for c in [false, true] {
                if recs.iter().any(|r| r.contrast == c && r.mean_hu.is_some()) {
                    keys.push(FitKey {
                        structure: s.clone(),
                        response: Response::MeanHu,
                        contrast: Some(c),
                    });
                }
            }
        }
        keys
    }

    /// Drops terms the cohort cannot identify (single level or constant).
    fn adapt_spec(&self, key: &FitKey, obs: &[Observation]) -> ModelSpec {
        let base = match key.response {
            Response::VolumeMl => ModelSpec::volume(),
            Response::MeanHu => ModelSpec::attenuation(),
        };
        base.with_study_mode(self.cfg.fit.study_effect_mode)
            .adapted_to(obs)
    }

    fn observations(&self, key: &FitKey) -> Vec<Observation> {
        self.cohort()
            .into_iter()
            .filter(|r| key.matches(r))
            .filter_map(|r| r.observation(key.response))
            .collect()
    }

    fn fit(&mut self, resumed: bool) -> Result<()> {
        let keys = self.fit_keys();
        if resumed {
            for key in keys {
                let a = load_artifact(&fs::read(
                    self.out.join("models").join(format!("{}.toml", key.name())),
                )?)?;
                self.models.push((key, a));
            }
            return Ok(());
        }
        let results: Vec<Result<(FitKey, ModelArtifact)>> = keys
            .into_iter()
            .map(|key| {
                let obs = self.observations(&key);
                let spec = self.adapt_spec(&key, &obs);
                let (model, search) = if self.cfg.fit.select {
                    let opts = SelectOptions {
                        max_degree_mu: self.cfg.fit.max_degree_mu,
                        max_degree_sigma: self.cfg.fit.max_degree_sigma,
                        refine: true,
                    };
                    let sel = select_fp_with(&obs, &spec, &opts)?;
                    (sel.model, sel.bic_table)
                } else {
                    let pm = PowerSet::new(&self.cfg.fit.powers_mu)?;
                    let ps = PowerSet::new(&self.cfg.fit.powers_sigma)?;
                    (fit(&obs, &spec, &pm, &ps)?, Vec::new())
                };
                let prov = Provenance {
                    data_hash: data_hash(&obs),
                    seed: self.cfg.seed,
                    software_version: env!("CARGO_PKG_VERSION").to_string(),
                    structure_id: key.structure.clone(),
                    fp_search: search,
                };
                Ok((key, ModelArtifact::new(model, prov)))
            })
            .collect();
        let mut index = Vec::new();
        for r in results {
            let (key, art) = r?;
            write(
                &self.out.join("models").join(format!("{}.toml", key.name())),
                save_artifact(&art)?,
            )?;
            index.push(vec![
                key.name(),
                key.structure.clone(),
                art.family.clone(),
                art.model.powers_mu.to_string(),
                art.model.powers_sigma.to_string(),
                art.model.fit.n.to_string(),
                art.model.fit.bic.to_string(),
            ]);
            self.models.push((key, art));
        }
        write(
            &self.out.join("models/index.csv"),
            csv_string(
                &[
                    "model",
                    "structure_id",
                    "family",
                    "powers_mu",
                    "powers_sigma",
                    "n",
                    "bic",
                ],
                index,
            )?,
        )
    }

    fn require_models(&self, stage: &str) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Contract(format!("stage {stage} needs fitted models; enable the fit stage or resume a run that completed it")));
        }
        Ok(())
    }

    fn ages(&self) -> Result<Vec<f64>> {
        let c = &self.cfg.chart;
        age_grid(c.age_from, c.age_to, c.age_step)
    }

    fn bootstrap(&mut self, resumed: bool) -> Result<()> {
        if resumed {
            return Ok(());
        }
        self.require_models("bootstrap")?;
        let ages = self.ages()?;
        for (i, (key, art)) in self.models.iter().enumerate() {
            let obs = self.observations(key);
            let mut opts = BootstrapOptions::new(
                self.cfg.bootstrap.replicates,
                seed_for(self.cfg.seed, 3, i),
                ages.clone(),
            );
            opts.max_failure_rate = self.cfg.bootstrap.max_failure_rate;
            let m = &art.model;
            let res =
                bootstrap_ci(&obs, &m.spec, &m.powers_mu, &m.powers_sigma, &opts).map_err(|e| {
                    match e {
                        Error::Numerical(msg) => Error::Numerical(format!("{}: {msg}", key.name())),
                        other => other,
                    }
                })?;
            if !res.failures.is_empty() {
                let rows = res
                    .failures
                    .iter()
                    .map(|f| vec![f.replicate.to_string(), f.error.clone()]);
                write(
                    &self
                        .out
                        .join("bootstrap")
                        .join(format!("{}_failures.csv", key.name())),
                    csv_string(&["replicate", "error"], rows)?,
                )?;
            }
            let rows = res.bands.iter().map(|b| {
                vec![
                    b.parameter.clone(),
                    format!("{:?}", b.sex),
                    b.age.to_string(),
                    b.lower.to_string(),
                    b.median.to_string(),
                    b.upper.to_string(),
                ]
            });
            write(
                &self
                    .out
                    .join("bootstrap")
                    .join(format!("{}.csv", key.name())),
                csv_string(
                    &["parameter", "sex", "age", "lower", "median", "upper"],
                    rows,
                )?,
            )?;
        }
        Ok(())
    }

    fn chart(&mut self, resumed: bool) -> Result<()> {
        if resumed {
            return Ok(());
        }
        self.require_models("chart")?;
        let ages = self.ages()?;
        for (key, art) in &self.models {
            for sex in [Sex::F, Sex::M] {
                let mut template = CovariateProfile::reference(&art.model, ages[0], sex);
                if let Some(c) = key.contrast {
                    template.contrast = c;
                }
                let table = chart_grid(
                    &art.model,
                    &key.structure,
                    &template,
                    &ages,
                    &self.cfg.chart.centiles,
                )?;
                write(
                    &self
                        .out
                        .join("charts")
                        .join(format!("{}_{sex:?}.csv", key.name())),
                    table.to_csv()?,
                )?;
            }
        }
        Ok(())
    }

    fn score(&mut self, resumed: bool) -> Result<()> {
        if resumed {
            return Ok(());
        }
        self.require_models("score")?;
        for (key, art) in &self.models {
            let mut rows = Vec::new();
            for r in self.data.records.iter().filter(|r| key.matches(r)) {
                let y = r.response(key.response).expect("matched");
                let profile = CovariateProfile {
                    age: r.age,
                    sex: r.sex,
                    manufacturer: r.manufacturer.clone(),
                    kvp: r.kvp.unwrap_or(f64::NAN),
                    contrast: r.contrast,
                    study: Some(r.study.clone()),
                };
                let s = score(&art.model, &profile, y)?;
                let excluded = self
                    .excluded
                    .get(&(r.scan_id.clone(), r.structure_id.clone()))
                    .cloned()
                    .unwrap_or_default();
                rows.push(vec![
                    r.scan_id.clone(),
                    y.to_string(),
                    s.centile.to_string(),
                    excluded,
                    s.warnings.join("; "),
                ]);
            }
            write(
                &self.out.join("scores").join(format!("{}.csv", key.name())),
                csv_string(
                    &["scan_id", "value", "centile", "excluded", "warnings"],
                    rows,
                )?,
            )?;
        }
        Ok(())
    }

    fn longitudinal(&mut self, resumed: bool) -> Result<()> {
        if resumed {
            return Ok(());
        }
        self.require_models("longitudinal")?;
        let cohort: Vec<MeasurementRecord> = self.cohort().into_iter().cloned().collect();
        let mut per_subject: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for r in &cohort {
            per_subject
                .entry(r.subject_id.as_str())
                .or_default()
                .insert(r.scan_id.as_str());
        }
        let repeated: BTreeSet<&str> = per_subject
            .iter()
            .filter(|(_, s)| s.len() > 1)
            .map(|(k, _)| *k)
            .collect();
        let family_size = self.models.len();
        for (key, art) in &self.models {
            let recs: Vec<MeasurementRecord> = cohort
                .iter()
                .filter(|r| key.matches(r) && repeated.contains(r.subject_id.as_str()))
                .cloned()
                .collect();
            if recs.is_empty() {
                continue;
            }
            let long = decompose_age(&recs)?;
            let coefs = match key.response {
                Response::VolumeMl => model_coefficients(&fit_long_volume(&long, &art.model)?),
                Response::MeanHu => {
                    fit_long_hu(&long, &art.model.powers_mu, key.contrast.unwrap_or(false))?
                        .coefficients
                }
            };
            write(
                &self
                    .out
                    .join("longitudinal")
                    .join(format!("{}.csv", key.name())),
                coefficients_csv(&coefs, self.cfg.longitudinal.alpha, family_size)?,
            )?;
        }
        Ok(())
    }
}

/// Sizes the global worker pool; fails if it is already running.
pub fn init_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Contract(format!("worker pool: {e}")))
}

/// Runs the configured stages and writes the output tree under `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out)?;
    let checkpoint = if cfg.resume {
        match fs::read(out.join("checkpoint.json")) {
            Ok(b) => serde_json::from_slice(&b)?,
            Err(_) => Checkpoint::default(),
        }
    } else {
        Checkpoint::default()
    };
    let (data, ingestion) = ingest_csv(&cfg.input.measurements, &cfg.input.schema)?;
    write(&out.join("ingestion.json"), to_json(&ingestion)?)?;
    let mut run = Run {
        cfg,
        out,
        checkpoint,
        summary: RunSummary {
            seed: cfg.seed,
            measurement_records: data.len(),
            ..RunSummary::default()
        },
        data,
        excluded: Excluded::new(),
        models: Vec::new(),
    };
    let s = cfg.stages;
    run.stage("curate", s.curate, |r, resumed| r.curate(resumed))?;
    let after_curation = run.excluded.len();
    run.stage("filter-reports", s.filter_reports, |r, resumed| {
        r.filter_reports(resumed)
    })?;
    run.summary.curation_excluded_records = after_curation;
    run.summary.report_excluded_records = run.excluded.len() - after_curation;
    run.summary.reference_cohort_records = run.cohort().len();
    run.stage("fit", s.fit, |r, resumed| r.fit(resumed))?;
    if !s.fit && (s.bootstrap || s.chart || s.score || s.longitudinal) && run.models.is_empty() {
        // Reuse artifacts from an earlier run when fitting is skipped.
        let keys = run.fit_keys();
        for key in keys {
            if let Ok(bytes) = fs::read(out.join("models").join(format!("{}.toml", key.name()))) {
                run.models.push((key, load_artifact(&bytes)?));
            }
        }
    }
    run.stage("bootstrap", s.bootstrap, |r, resumed| r.bootstrap(resumed))?;
    run.stage("chart", s.chart, |r, resumed| r.chart(resumed))?;
    run.stage("score", s.score, |r, resumed| r.score(resumed))?;
    run.stage("longitudinal", s.longitudinal, |r, resumed| {
        r.longitudinal(resumed)
    })?;
    run.summary.models = run.models.iter().map(|(k, _)| k.name()).collect();
    write(&out.join("run_summary.json"), to_json(&run.summary)?)?;
    Ok(run.summary)
}
