use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::registry::{Registry, TargetId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Abnormal,
    Normal,
}

/// One validated Stage-1 claim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub target_id: TargetId,
    pub canonical_name: String,
    pub report_name: String,
    pub evidence: String,
    pub status: Option<Status>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Unparseable,
    Schema,
    UnknownTarget,
    Ungrounded,
    NormalStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    /// Position of the record in the output; `None` for whole-output rejections.
    pub index: Option<usize>,
    pub reason: RejectReason,
    pub detail: String,
}

/// Collapses whitespace runs to single spaces and trims; case is kept.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn is_grounded(evidence: &str, report: &str) -> bool {
    let e = normalize_ws(evidence);
    !e.is_empty() && normalize_ws(report).contains(&e)
}

fn field_str<'a>(obj: &'a serde_json::Map<String, Value>, name: &str) -> Result<&'a str, String> {
    match obj.get(name) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(format!("field {name} is not a string")),
        None => Err(format!("missing field {name}")),
    }
}

fn record_from(v: &Value) -> Result<ExtractionRecord, String> {
    let obj = v.as_object().ok_or("record is not an object")?;
    let target_id = match obj.get("structure_id") {
        Some(Value::Number(n)) => n
            .as_u64()
            .and_then(|x| TargetId::try_from(x).ok())
            .ok_or_else(|| format!("structure_id {n} is not a valid identifier"))?,
        Some(_) => return Err("field structure_id is not an integer".into()),
        None => return Err("missing field structure_id".into()),
    };
    let status = match obj.get("status") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => match s.trim().to_ascii_lowercase().as_str() {
            "abnormal" => Some(Status::Abnormal),
            "normal" => Some(Status::Normal),
            other => return Err(format!("unknown status {other:?}")),
        },
        Some(_) => return Err("field status is not a string".into()),
    };
    Ok(ExtractionRecord {
        target_id,
        canonical_name: field_str(obj, "canonical_name")?.to_string(),
        report_name: field_str(obj, "report_name")?.to_string(),
        evidence: field_str(obj, "evidence")?.to_string(),
        status,
    })
}

/// Validates one model's raw Stage-1 output against the report and registry.
/// Never fails: everything that does not survive lands in the audit log.
pub fn parse_stage1(
    raw: &[u8],
    report: &str,
    registry: &Registry,
) -> (Vec<ExtractionRecord>, Vec<AuditEntry>) {
    let mut audit = Vec::new();
    let items = match serde_json::from_slice::<Value>(raw) {
        Ok(Value::Array(items)) => items,
        Ok(_) => {
            audit.push(AuditEntry {
                index: None,
                reason: RejectReason::Unparseable,
                detail: "output is not a JSON list".into(),
            });
            return (Vec::new(), audit);
        }
        Err(e) => {
            audit.push(AuditEntry {
                index: None,
                reason: RejectReason::Unparseable,
                detail: e.to_string(),
            });
            return (Vec::new(), audit);
        }
    };
    let mut records = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let reject = |reason, detail: String| AuditEntry {
            index: Some(i),
            reason,
            detail,
        };
        let rec = match record_from(item) {
            Ok(r) => r,
            Err(detail) => {
                audit.push(reject(RejectReason::Schema, detail));
                continue;
            }
        };
        if !registry.contains(rec.target_id) {
            audit.push(reject(
                RejectReason::UnknownTarget,
                format!("target {} is not in the registry", rec.target_id),
            ));
        } else if rec.status == Some(Status::Normal) {
            audit.push(reject(
                RejectReason::NormalStatus,
                format!("target {} reported as normal", rec.target_id),
            ));
        } else if !is_grounded(&rec.evidence, report) {
            audit.push(reject(
                RejectReason::Ungrounded,
                format!("evidence for target {} not found in report", rec.target_id),
            ));
        } else {
            records.push(rec);
        }
    }
    (records, audit)
}

/// Abnormal targets of one report according to one method.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbnormalitySet {
    pub report_id: String,
    pub targets: BTreeSet<TargetId>,
}

impl AbnormalitySet {
    pub fn new(report_id: impl Into<String>, targets: impl IntoIterator<Item = TargetId>) -> Self {
        Self {
            report_id: report_id.into(),
            targets: targets.into_iter().collect(),
        }
    }

    pub fn from_records(report_id: impl Into<String>, records: &[ExtractionRecord]) -> Self {
        Self::new(report_id, records.iter().map(|r| r.target_id))
    }
}

/// Evidence-only adjudication input. Carries no model identities and no
/// report text beyond the pooled sentences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationTask {
    pub target_id: TargetId,
    pub canonical_name: String,
    pub pooled_evidence: Vec<String>,
}

/// Pools and deduplicates (after whitespace normalization) the evidence of
/// every model for each disputed target, in model then record order.
pub fn build_tasks(
    per_model: &[Vec<ExtractionRecord>],
    disputed: &BTreeSet<TargetId>,
    registry: &Registry,
) -> Vec<VerificationTask> {
    disputed
        .iter()
        .filter_map(|&id| {
            let mut pooled: Vec<String> = Vec::new();
            for rec in per_model.iter().flatten().filter(|r| r.target_id == id) {
                let e = normalize_ws(&rec.evidence);
                if !e.is_empty() && !pooled.contains(&e) {
                    pooled.push(e);
                }
            }
            let target = registry.get(id)?;
            (!pooled.is_empty()).then(|| VerificationTask {
                target_id: id,
                canonical_name: target.canonical_name.clone(),
                pooled_evidence: pooled,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const REPORT: &str = "Liver is enlarged.\nSmall  cyst in the left kidney. Spleen normal.";

    #[test]
    fn verbatim_evidence_is_kept() {
        let reg = Registry::bundled();
        let raw = br#"[{"structure_id":4,"canonical_name":"liver","report_name":"Liver","evidence":"Liver is enlarged."}]"#;
        let (recs, audit) = parse_stage1(raw, REPORT, &reg);
        assert_eq!(recs.len(), 1);
        assert!(audit.is_empty());
    }

    #[test]
    fn whitespace_differences_are_tolerated() {
        let reg = Registry::bundled();
        let raw = br#"[{"structure_id":2,"canonical_name":"kidney","report_name":"left kidney","evidence":"Small cyst in the left   kidney."}]"#;
        assert_eq!(parse_stage1(raw, REPORT, &reg).0.len(), 1);
        let raw = br#"[{"structure_id":2,"canonical_name":"kidney","report_name":"left kidney","evidence":"small cyst in the left kidney."}]"#;
        assert_eq!(
            parse_stage1(raw, REPORT, &reg).1[0].reason,
            RejectReason::Ungrounded
        );
    }

    #[test]
    fn rejections_carry_reasons() {
        let reg = Registry::bundled();
        let raw = br#"[
            {"structure_id":1,"canonical_name":"spleen","report_name":"Spleen","evidence":"Spleen normal.","status":"normal"},
            {"structure_id":4,"canonical_name":"liver","report_name":"Liver","evidence":"Liver shows metastases."},
            {"structure_id":400,"canonical_name":"x","report_name":"x","evidence":"Liver is enlarged."},
            {"structure_id":"4","canonical_name":"liver","report_name":"Liver","evidence":"Liver is enlarged."},
            {"structure_id":4,"canonical_name":"liver","report_name":"Liver","evidence":"Liver is enlarged.","status":"abnormal"}
        ]"#;
        let (recs, audit) = parse_stage1(raw, REPORT, &reg);
        assert_eq!(recs.len(), 1);
        let reasons: Vec<RejectReason> = audit.iter().map(|a| a.reason).collect();
        assert_eq!(
            reasons,
            vec![
                RejectReason::NormalStatus,
                RejectReason::Ungrounded,
                RejectReason::UnknownTarget,
                RejectReason::Schema
            ]
        );
    }

    #[test]
    fn garbage_output_is_audited_not_fatal() {
        let reg = Registry::bundled();
        for raw in [&b"not json"[..], b"{\"a\":1}", b"", b"[1,2"] {
            let (recs, audit) = parse_stage1(raw, REPORT, &reg);
            assert!(recs.is_empty());
            assert_eq!(audit.len(), 1);
            assert_eq!(audit[0].reason, RejectReason::Unparseable);
        }
    }

    #[test]
    fn pooled_evidence_is_deduplicated_and_stable() {
        let reg = Registry::bundled();
        let rec = |e: &str| ExtractionRecord {
            target_id: 4,
            canonical_name: "liver".into(),
            report_name: "liver".into(),
            evidence: e.into(),
            status: None,
        };
        let per_model = vec![
            vec![rec("Liver is enlarged.")],
            vec![rec(" Liver  is enlarged. "), rec("Fatty liver.")],
            vec![],
        ];
        let disputed = BTreeSet::from([4]);
        let a = build_tasks(&per_model, &disputed, &reg);
        assert_eq!(
            a[0].pooled_evidence,
            vec!["Liver is enlarged.", "Fatty liver."]
        );
        assert_eq!(a, build_tasks(&per_model, &disputed, &reg));
    }

    #[test]
    fn task_serialization_is_blind() {
        let task = VerificationTask {
            target_id: 4,
            canonical_name: "liver".into(),
            pooled_evidence: vec!["Liver is enlarged.".into()],
        };
        let v = serde_json::to_value(&task).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, vec!["canonical_name", "pooled_evidence", "target_id"]);
    }
}
