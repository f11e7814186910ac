//! Two-stage report-based abnormality filtering: independent evidence-grounded
//! extraction by several models, then evidence-only verification of disputed
//! targets.

mod aggregate;
mod backend;
mod extract;
mod registry;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use aggregate::{
    agreement_metrics, consensus_partition, jaccard, majority_vote, AgreementMetrics, Consensus,
    MethodScore,
};
pub use backend::{ChatRequest, FixtureBackend, HttpBackend, ModelBackend};
pub use extract::{
    build_tasks, is_grounded, normalize_ws, parse_stage1, AbnormalitySet, AuditEntry,
    ExtractionRecord, RejectReason, Status, VerificationTask,
};
pub use registry::{CanonicalTarget, Registry, TargetId};

use crate::error::{Error, Result};

pub const STAGE1_PROMPT: &str = include_str!("../../prompts/stage1.txt");
pub const VERIFY_PROMPT: &str = include_str!("../../prompts/verify.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub report_id: String,
    pub language: String,
    pub text: String,
}

/// Reads a `report_id,language,text` CSV.
pub fn parse_corpus(bytes: &[u8]) -> Result<Vec<Report>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for row in rdr.deserialize::<Report>() {
        let r = row?;
        if r.report_id.trim().is_empty() {
            return Err(Error::Parse("empty report_id".into()));
        }
        if !seen.insert(r.report_id.clone()) {
            return Err(Error::Parse(format!("duplicate report_id {}", r.report_id)));
        }
        out.push(r);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct LabelRow {
    report_id: String,
    target_ids: String,
}

fn parse_id_list(s: &str) -> Result<Vec<TargetId>> {
    s.split(';')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<TargetId>()
                .map_err(|e| Error::Parse(format!("target id {t:?}: {e}")))
        })
        .collect()
}

/// Reads `report_id,target_ids` rows with `;`-separated ids (empty allowed).
pub fn parse_label_sets(bytes: &[u8]) -> Result<Vec<AbnormalitySet>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for row in rdr.deserialize::<LabelRow>() {
        let r = row?;
        out.push(AbnormalitySet::new(
            r.report_id,
            parse_id_list(&r.target_ids)?,
        ));
    }
    Ok(out)
}

pub fn label_sets_csv(sets: &[AbnormalitySet]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["report_id", "target_ids"])?;
    for s in sets {
        let ids: Vec<String> = s.targets.iter().map(ToString::to_string).collect();
        w.write_record([s.report_id.as_str(), ids.join(";").as_str()])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub fn stage1_schema() -> Value {
    json!({
        "type": "array",
        "items": {
            "type": "object",
            "properties": {
                "structure_id": {"type": "integer"},
                "canonical_name": {"type": "string"},
                "report_name": {"type": "string"},
                "evidence": {"type": "string"},
                "status": {"type": "string", "enum": ["abnormal", "normal"]},
            },
            "required": ["structure_id", "canonical_name", "report_name", "evidence"],
            "additionalProperties": false,
        },
    })
}

pub fn verify_schema() -> Value {
    json!({
        "type": "object",
        "properties": {"abnormal": {"type": "boolean"}},
        "required": ["abnormal"],
        "additionalProperties": false,
    })
}

pub fn stage1_request(model: &str, report: &Report, registry: &Registry) -> ChatRequest {
    let mut system = String::from(STAGE1_PROMPT);
    system.push_str("\nCanonical targets:\n");
    for t in registry.targets() {
        system.push_str(&format!("{}: {}\n", t.target_id, t.canonical_name));
    }
    ChatRequest::new(model, system, report.text.clone(), stage1_schema())
}

pub fn verify_request(model: &str, task: &VerificationTask) -> ChatRequest {
    ChatRequest::new(
        model,
        VERIFY_PROMPT,
        serde_json::to_string(task).expect("task serializes"),
        verify_schema(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Affirmed,
    Rejected,
    /// Backend failure or unusable answer.
    Undecided,
}

/// What an undecided verification counts as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndecidedPolicy {
    #[default]
    Abnormal,
    Normal,
}

pub fn parse_verdict(raw: &str) -> Verdict {
    match serde_json::from_str::<Value>(raw)
        .ok()
        .as_ref()
        .and_then(|v| v.get("abnormal"))
        .and_then(Value::as_bool)
    {
        Some(true) => Verdict::Affirmed,
        Some(false) => Verdict::Rejected,
        None => Verdict::Undecided,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub verifier: String,
    pub verdicts: BTreeMap<TargetId, Verdict>,
    pub final_set: AbnormalitySet,
    pub affirmed: usize,
    pub rejected: usize,
    pub undecided: usize,
}

impl Verification {
    /// Share of disputed targets kept as abnormal.
    pub fn retention(&self) -> f64 {
        let total = self.verdicts.len();
        if total == 0 {
            return f64::NAN;
        }
        let kept = self
            .verdicts
            .keys()
            .filter(|id| self.final_set.targets.contains(id))
            .count();
        kept as f64 / total as f64
    }
}

/// Final set = unanimous ∪ disputed targets the verifier affirms.
pub fn verify_disputed(
    consensus: &Consensus,
    tasks: &[VerificationTask],
    verifier: &dyn ModelBackend,
    policy: UndecidedPolicy,
) -> Verification {
    let mut verdicts = BTreeMap::new();
    for task in tasks
        .iter()
        .filter(|t| consensus.disputed.contains(&t.target_id))
    {
        let v = match verifier.complete(&verify_request(verifier.name(), task)) {
            Ok(raw) => parse_verdict(&raw),
            Err(e) => {
                log::warn!(
                    "verification of target {} in {} failed: {e}",
                    task.target_id,
                    consensus.report_id
                );
                Verdict::Undecided
            }
        };
        verdicts.insert(task.target_id, v);
    }
    // Disputed targets without pooled evidence cannot be affirmed.
    for id in &consensus.disputed {
        verdicts.entry(*id).or_insert(Verdict::Rejected);
    }
    let mut targets = consensus.unanimous_abnormal.clone();
    for (id, v) in &verdicts {
        let keep = match v {
            Verdict::Affirmed => true,
            Verdict::Rejected => false,
            Verdict::Undecided => policy == UndecidedPolicy::Abnormal,
        };
        if keep {
            targets.insert(*id);
        }
    }
    let count = |k: Verdict| verdicts.values().filter(|v| **v == k).count();
    Verification {
        verifier: verifier.name().to_string(),
        affirmed: count(Verdict::Affirmed),
        rejected: count(Verdict::Rejected),
        undecided: count(Verdict::Undecided),
        final_set: AbnormalitySet {
            report_id: consensus.report_id.clone(),
            targets,
        },
        verdicts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAudit {
    pub model: String,
    pub backend_error: Option<String>,
    pub rejected: Vec<AuditEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOutcome {
    pub report_id: String,
    pub stage1: Vec<AbnormalitySet>,
    pub audits: Vec<ModelAudit>,
    pub consensus: Consensus,
    pub tasks: Vec<VerificationTask>,
    pub majority_stage1: AbnormalitySet,
    /// One verification per configured verifier; the first is final.
    pub verifications: Vec<Verification>,
}

impl ReportOutcome {
    pub fn final_set(&self) -> &AbnormalitySet {
        &self.verifications[0].final_set
    }
}

/// Runs both stages over a corpus with fixed extractor and verifier backends.
pub struct ReportFilter {
    pub registry: Registry,
    pub extractors: Vec<Arc<dyn ModelBackend>>,
    pub verifiers: Vec<Arc<dyn ModelBackend>>,
    pub policy: UndecidedPolicy,
}

impl ReportFilter {
    pub fn run_report(&self, report: &Report) -> Result<ReportOutcome> {
        if self.extractors.is_empty() || self.verifiers.is_empty() {
            return Err(Error::Contract(
                "report filtering needs at least one extractor and one verifier".into(),
            ));
        }
        let mut records = Vec::new();
        let mut audits = Vec::new();
        for m in &self.extractors {
            let (recs, audit) = match m.complete(&stage1_request(m.name(), report, &self.registry))
            {
                Ok(raw) => {
                    let (r, a) = parse_stage1(raw.as_bytes(), &report.text, &self.registry);
                    (
                        r,
                        ModelAudit {
                            model: m.name().to_string(),
                            backend_error: None,
                            rejected: a,
                        },
                    )
                }
                Err(e) => (
                    Vec::new(),
                    ModelAudit {
                        model: m.name().to_string(),
                        backend_error: Some(e.to_string()),
                        rejected: Vec::new(),
                    },
                ),
            };
            records.push(recs);
            audits.push(audit);
        }
        let stage1: Vec<AbnormalitySet> = records
            .iter()
            .map(|r| AbnormalitySet::from_records(&report.report_id, r))
            .collect();
        let consensus = consensus_partition(&stage1, self.registry.ids())?;
        let tasks = build_tasks(&records, &consensus.disputed, &self.registry);
        let verifications = self
            .verifiers
            .iter()
            .map(|v| verify_disputed(&consensus, &tasks, v.as_ref(), self.policy))
            .collect();
        Ok(ReportOutcome {
            report_id: report.report_id.clone(),
            majority_stage1: majority_vote(&stage1)?,
            stage1,
            audits,
            consensus,
            tasks,
            verifications,
        })
    }

    /// Reports are independent; results come back in corpus order.
    pub fn run(&self, corpus: &[Report]) -> Result<Vec<ReportOutcome>> {
        corpus.par_iter().map(|r| self.run_report(r)).collect()
    }
}

/// Per-method abnormality sets across a corpus: each extractor's Stage-1
/// sets, Stage-1 majority vote, and each verifier's Stage-2 sets.
pub fn method_sets(
    outcomes: &[ReportOutcome],
    extractor_names: &[String],
    verifier_names: &[String],
) -> Vec<(String, Vec<AbnormalitySet>)> {
    let mut out: Vec<(String, Vec<AbnormalitySet>)> = extractor_names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            (
                format!("{n}:stage1"),
                outcomes.iter().map(|o| o.stage1[i].clone()).collect(),
            )
        })
        .collect();
    out.push((
        "majority:stage1".into(),
        outcomes.iter().map(|o| o.majority_stage1.clone()).collect(),
    ));
    for (i, n) in verifier_names.iter().enumerate() {
        out.push((
            format!("{n}:stage2"),
            outcomes
                .iter()
                .map(|o| o.verifications[i].final_set.clone())
                .collect(),
        ));
    }
    out
}
