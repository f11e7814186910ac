//! Versioned, human-readable model artifacts.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dist::Family;
use crate::engine::{BicEntry, ChartModel, Observation};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Hex SHA-256 of the training observations.
    pub data_hash: String,
    #[serde(with = "decimal")]
    pub seed: u64,
    pub software_version: String,
    pub structure_id: String,
    #[serde(default)]
    pub fp_search: Vec<BicEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u64,
    pub family: String,
    pub provenance: Provenance,
    pub model: ChartModel,
}

mod decimal {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

impl ModelArtifact {
    pub fn new(model: ChartModel, provenance: Provenance) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            family: model.spec.family.tag().to_string(),
            provenance,
            model,
        }
    }
}

pub fn data_hash(data: &[Observation]) -> String {
    let mut h = Sha256::new();
    for o in data {
        h.update(o.y.to_le_bytes());
        h.update(o.age.to_le_bytes());
        h.update([o.sex as u8, o.contrast as u8]);
        h.update(o.kvp.to_le_bytes());
        h.update(o.time.to_le_bytes());
        for s in [&o.manufacturer, &o.group] {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s.as_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_artifact(artifact: &ModelArtifact) -> Result<String> {
    if artifact.family != artifact.model.spec.family.tag() {
        return Err(Error::Contract(format!(
            "artifact family {} does not match model family {}",
            artifact.family, artifact.model.spec.family
        )));
    }
    toml::to_string(artifact).map_err(|e| Error::Parse(e.to_string()))
}

/// Parses an artifact, rejecting newer format versions and unknown
/// families before touching the model payload.
pub fn load_artifact(bytes: &[u8]) -> Result<ModelArtifact> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::Parse(format!("artifact is not UTF-8: {e}")))?;
    let doc: toml::Table = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let version = doc
        .get("format_version")
        .and_then(toml::Value::as_integer)
        .ok_or_else(|| Error::Parse("missing integer format_version".into()))?;
    if version < 1 || version as u64 > FORMAT_VERSION {
        return Err(Error::Version {
            found: version.max(0) as u64,
            supported: FORMAT_VERSION,
        });
    }
    let tag = doc
        .get("family")
        .and_then(toml::Value::as_str)
        .ok_or_else(|| Error::Parse("missing family tag".into()))?;
    let family = Family::from_tag(tag)?;
    let inner = doc
        .get("model")
        .and_then(|m| m.get("spec"))
        .and_then(|s| s.get("family"))
        .and_then(toml::Value::as_str)
        .ok_or_else(|| Error::Parse("missing model.spec.family".into()))?;
    if Family::from_tag(inner)? != family {
        return Err(Error::Parse(format!(
            "family tag {tag} disagrees with model family {inner}"
        )));
    }
    toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}
