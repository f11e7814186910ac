//! Measurement records and CSV ingestion.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{Observation, Response};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

/// One structure measurement on one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub scan_id: String,
    pub subject_id: String,
    pub study: String,
    /// Acquisition date as `YYYY-MM-DD`, when known.
    pub date: Option<String>,
    pub age: f64,
    pub sex: Sex,
    pub manufacturer: String,
    pub kvp: Option<f64>,
    pub contrast: bool,
    pub structure_id: String,
    pub volume_ml: Option<f64>,
    pub mean_hu: Option<f64>,
}

impl MeasurementRecord {
    pub fn response(&self, r: Response) -> Option<f64> {
        match r {
            Response::VolumeMl => self.volume_ml,
            Response::MeanHu => self.mean_hu,
        }
    }

    /// Cross-sectional observation with the study as group label.
    pub fn observation(&self, r: Response) -> Option<Observation> {
        Some(Observation {
            y: self.response(r)?,
            age: self.age,
            sex: self.sex,
            manufacturer: self.manufacturer.clone(),
            kvp: self.kvp.unwrap_or(f64::NAN),
            contrast: self.contrast,
            group: self.study.clone(),
            time: 0.0,
        })
    }
}

/// CSV header names for each record field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub scan_id: String,
    pub subject_id: String,
    pub study: String,
    pub date: String,
    pub age: String,
    pub sex: String,
    pub manufacturer: String,
    pub kvp: String,
    pub contrast: String,
    pub structure_id: String,
    pub volume_ml: String,
    pub mean_hu: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            scan_id: "scan_id".into(),
            subject_id: "subject_id".into(),
            study: "study".into(),
            date: "date".into(),
            age: "age".into(),
            sex: "sex".into(),
            manufacturer: "manufacturer".into(),
            kvp: "kvp".into(),
            contrast: "contrast".into(),
            structure_id: "structure_id".into(),
            volume_ml: "volume_ml".into(),
            mean_hu: "mean_hu".into(),
        }
    }
}

/// Ingestion settings: column names, sex synonyms and which optional
/// covariates a row must carry to be kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaConfig {
    pub columns: ColumnMap,
    /// Extra spellings mapped to `F` / `M` (matched case-insensitively).
    pub sex_synonyms: BTreeMap<String, Sex>,
    pub require_kvp: bool,
    pub require_volume: bool,
    pub require_hu: bool,
    pub min_age: f64,
    pub max_age: f64,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self {
            columns: ColumnMap::default(),
            sex_synonyms: BTreeMap::new(),
            require_kvp: true,
            require_volume: false,
            require_hu: false,
            min_age: 18.0,
            max_age: 120.0,
        }
    }
}

impl SchemaConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("schema config: {e}")))
    }

    fn parse_sex(&self, raw: &str) -> Option<Sex> {
        let s = raw.trim();
        match s {
            "F" => return Some(Sex::F),
            "M" => return Some(Sex::M),
            _ => {}
        }
        self.sex_synonyms
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(s))
            .map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectedRow {
    /// 1-based data line (header excluded).
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestionReport {
    pub rows_read: usize,
    pub accepted: usize,
    pub missing_covariate: usize,
    pub rejected: Vec<RejectedRow>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<MeasurementRecord>,
}

impl Dataset {
    pub fn new(records: Vec<MeasurementRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert((r.scan_id.as_str(), r.structure_id.as_str())) {
                return Err(Error::DuplicateRecord {
                    scan_id: r.scan_id.clone(),
                    structure_id: r.structure_id.clone(),
                });
            }
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Structure ids in lexical order.
    pub fn structures(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.structure_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn for_structure<'a>(
        &'a self,
        structure: &'a str,
    ) -> impl Iterator<Item = &'a MeasurementRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| r.structure_id == structure)
    }

    /// Observations of one structure that carry the response, optionally
    /// restricted to one contrast state.
    pub fn observations(
        &self,
        structure: &str,
        response: Response,
        contrast: Option<bool>,
    ) -> Vec<Observation> {
        self.for_structure(structure)
            .filter(|r| contrast.is_none_or(|c| r.contrast == c))
            .filter_map(|r| r.observation(response))
            .collect()
    }
}

fn parse_bool(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" | "t" => Some(true),
        "0" | "false" | "no" | "n" | "f" => Some(false),
        _ => None,
    }
}

enum Cell<T> {
    Missing,
    Bad(String),
    Ok(T),
}

fn parse_num(raw: Option<&str>) -> Cell<f64> {
    match raw.map(str::trim) {
        None | Some("") | Some("NA") | Some("NaN") => Cell::Missing,
        Some(s) => match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Cell::Ok(v),
            _ => Cell::Bad(s.to_string()),
        },
    }
}

/// Reads measurement rows from any CSV source.
pub fn ingest_reader<R: Read>(reader: R, cfg: &SchemaConfig) -> Result<(Dataset, IngestionReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let c = &cfg.columns;
    let col = |name: &str| index.get(name).copied();
    let need = |name: &str| {
        col(name)
            .ok_or_else(|| Error::Parse(format!("required column {name:?} missing from header")))
    };
    let i_scan = need(&c.scan_id)?;
    let i_struct = need(&c.structure_id)?;
    let i_age = need(&c.age)?;
    let i_sex = need(&c.sex)?;
    let i_subject = col(&c.subject_id);
    let i_study = col(&c.study);
    let i_date = col(&c.date);
    let i_manu = col(&c.manufacturer);
    let i_kvp = col(&c.kvp);
    let i_contrast = col(&c.contrast);
    let i_vol = col(&c.volume_ml);
    let i_hu = col(&c.mean_hu);
    if cfg.require_kvp && i_kvp.is_none() {
        return Err(Error::Parse(format!(
            "required column {:?} missing from header",
            c.kvp
        )));
    }

    let mut report = IngestionReport::default();
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, row) in rdr.records().enumerate() {
        let line = line + 1;
        report.rows_read += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                report.rejected.push(RejectedRow {
                    line,
                    reason: format!("malformed row: {e}"),
                });
                continue;
            }
        };
        let get = |i: Option<usize>| i.and_then(|i| row.get(i)).filter(|s| !s.is_empty());
        let mut reject = |reason: String| report.rejected.push(RejectedRow { line, reason });

        let (Some(scan_id), Some(structure_id)) = (get(Some(i_scan)), get(Some(i_struct))) else {
            reject("missing scan or structure identifier".into());
            continue;
        };
        let age = match parse_num(get(Some(i_age))) {
            Cell::Ok(v) if v >= cfg.min_age && v <= cfg.max_age => v,
            Cell::Ok(v) => {
                reject(format!(
                    "age {v} outside [{}, {}]",
                    cfg.min_age, cfg.max_age
                ));
                continue;
            }
            Cell::Bad(s) => {
                reject(format!("unparseable age {s:?}"));
                continue;
            }
            Cell::Missing => {
                report.missing_covariate += 1;
                continue;
            }
        };
        let sex = match get(Some(i_sex)) {
            None => {
                report.missing_covariate += 1;
                continue;
            }
            Some(s) => match cfg.parse_sex(s) {
                Some(v) => v,
                None => {
                    reject(format!("unrecognized sex {s:?}"));
                    continue;
                }
            },
        };
        let mut nums = [None; 3];
        let mut bad = None;
        for (slot, idx, name) in [
            (0, i_kvp, "kvp"),
            (1, i_vol, "volume_ml"),
            (2, i_hu, "mean_hu"),
        ] {
            match parse_num(get(idx)) {
                Cell::Ok(v) => nums[slot] = Some(v),
                Cell::Bad(s) => bad = Some(format!("unparseable {name} {s:?}")),
                Cell::Missing => {}
            }
        }
        if let Some(reason) = bad {
            reject(reason);
            continue;
        }
        let [kvp, volume_ml, mean_hu] = nums;
        if volume_ml.is_some_and(|v| v <= 0.0) {
            reject(format!(
                "non-positive volume {}",
                volume_ml.unwrap_or_default()
            ));
            continue;
        }
        let contrast = match get(i_contrast) {
            None => None,
            Some(s) => match parse_bool(s) {
                Some(b) => Some(b),
                None => {
                    reject(format!("unparseable contrast flag {s:?}"));
                    continue;
                }
            },
        };
        let manufacturer = get(i_manu);
        let missing = (cfg.require_kvp && kvp.is_none())
            || (cfg.require_volume && volume_ml.is_none())
            || (cfg.require_hu && mean_hu.is_none())
            || contrast.is_none()
            || manufacturer.is_none();
        if missing {
            report.missing_covariate += 1;
            continue;
        }
        if !seen.insert((scan_id.to_string(), structure_id.to_string())) {
            return Err(Error::DuplicateRecord {
                scan_id: scan_id.into(),
                structure_id: structure_id.into(),
            });
        }
        records.push(MeasurementRecord {
            scan_id: scan_id.into(),
            subject_id: get(i_subject).unwrap_or(scan_id).into(),
            study: get(i_study).unwrap_or("default").into(),
            date: get(i_date).map(str::to_string),
            age,
            sex,
            manufacturer: manufacturer.unwrap_or_default().into(),
            kvp,
            contrast: contrast.unwrap_or(false),
            structure_id: structure_id.into(),
            volume_ml,
            mean_hu,
        });
    }
    report.accepted = records.len();
    Ok((Dataset { records }, report))
}

pub fn ingest_csv(
    path: impl AsRef<Path>,
    cfg: &SchemaConfig,
) -> Result<(Dataset, IngestionReport)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    ingest_reader(std::io::BufReader::new(file), cfg)
}

/// Writes records with the default column names.
pub fn write_csv<W: std::io::Write>(writer: W, records: &[MeasurementRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let c = ColumnMap::default();
    w.write_record([
        &c.scan_id,
        &c.subject_id,
        &c.study,
        &c.date,
        &c.age,
        &c.sex,
        &c.manufacturer,
        &c.kvp,
        &c.contrast,
        &c.structure_id,
        &c.volume_ml,
        &c.mean_hu,
    ])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in records {
        w.write_record([
            r.scan_id.clone(),
            r.subject_id.clone(),
            r.study.clone(),
            r.date.clone().unwrap_or_default(),
            format!("{}", r.age),
            format!("{:?}", r.sex),
            r.manufacturer.clone(),
            opt(r.kvp),
            if r.contrast { "1".into() } else { "0".into() },
            r.structure_id.clone(),
            opt(r.volume_ml),
            opt(r.mean_hu),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "scan_id,subject_id,study,date,age,sex,manufacturer,kvp,contrast,structure_id,volume_ml,mean_hu\n";

    fn ingest(body: &str, cfg: &SchemaConfig) -> Result<(Dataset, IngestionReport)> {
        ingest_reader(format!("{HEADER}{body}").as_bytes(), cfg)
    }

    #[test]
    fn parses_typed_rows() {
        let (ds, rep) = ingest(
            "1,s1,A,2020-01-02,61.5,M,GE,120,1,12,1500.5,55\n",
            &SchemaConfig::default(),
        )
        .unwrap();
        assert_eq!(rep.accepted, 1);
        let r = &ds.records[0];
        assert_eq!(r.sex, Sex::M);
        assert_eq!(r.kvp, Some(120.0));
        assert!(r.contrast);
        assert_eq!(r.volume_ml, Some(1500.5));
        assert_eq!(r.date.as_deref(), Some("2020-01-02"));
    }

    #[test]
    fn missing_kvp_is_counted_not_rejected() {
        let cfg = SchemaConfig {
            require_hu: true,
            ..SchemaConfig::default()
        };
        let (ds, rep) = ingest(
            "1,s1,A,,60,F,GE,,0,12,,40\n2,s2,A,,60,F,GE,120,0,12,,41\n",
            &cfg,
        )
        .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(rep.missing_covariate, 1);
        assert!(rep.rejected.is_empty());
    }

    #[test]
    fn duplicate_pair_names_scan_and_structure() {
        let err = ingest(
            "7,s,A,,60,F,GE,120,0,12,10,\n7,s,A,,60,F,GE,120,0,12,11,\n",
            &SchemaConfig::default(),
        )
        .unwrap_err();
        match err {
            Error::DuplicateRecord {
                scan_id,
                structure_id,
            } => {
                assert_eq!(scan_id, "7");
                assert_eq!(structure_id, "12");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unparseable_numbers_reject_with_reason() {
        let (ds, rep) = ingest(
            "1,s,A,,sixty,F,GE,120,0,12,10,\n2,s,A,,60,F,GE,12o,0,12,10,\n",
            &SchemaConfig::default(),
        )
        .unwrap();
        assert!(ds.is_empty());
        assert_eq!(rep.rejected.len(), 2);
        assert!(rep.rejected[0].reason.contains("age"));
        assert!(rep.rejected[1].reason.contains("kvp"));
    }

    #[test]
    fn sex_synonyms_are_configurable() {
        let mut cfg = SchemaConfig::default();
        cfg.sex_synonyms.insert("female".into(), Sex::F);
        cfg.sex_synonyms.insert("w".into(), Sex::F);
        let (ds, rep) = ingest("1,s,A,,60,Female,GE,120,0,1,10,\n2,s,A,,60,W,GE,120,0,1,10,\n3,s,A,,60,x,GE,120,0,1,10,\n", &cfg).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.records.iter().all(|r| r.sex == Sex::F));
        assert_eq!(rep.rejected.len(), 1);
    }

    #[test]
    fn column_names_come_from_mapping() {
        let cfg = SchemaConfig::from_toml(
            "require_kvp = false\n[columns]\nscan_id = \"Scan\"\nage = \"AgeYears\"\n",
        )
        .unwrap();
        let csv = "Scan,AgeYears,sex,structure_id,manufacturer,contrast,volume_ml\nx,50,F,liver,Siemens,0,1400\n";
        let (ds, _) = ingest_reader(csv.as_bytes(), &cfg).unwrap();
        assert_eq!(ds.records[0].scan_id, "x");
        assert_eq!(ds.records[0].age, 50.0);
    }

    #[test]
    fn write_then_read_round_trips() {
        let (ds, _) = ingest("1,s1,A,2020-01-02,61.5,M,GE,120,1,12,1500.5,55\n2,s1,B,,70.25,F,Siemens,100,0,3,2.5,-4\n", &SchemaConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &ds.records).unwrap();
        let (back, _) = ingest_reader(buf.as_slice(), &SchemaConfig::default()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn missing_header_column_is_a_parse_error() {
        let err =
            ingest_reader("scan_id,age\n1,50\n".as_bytes(), &SchemaConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
    }
}
