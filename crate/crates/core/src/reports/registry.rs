use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TargetId = u32;

const BUNDLED: &str = include_str!("../../data/registry.csv");

/// One canonical anatomical target and the segmentation labels merged into it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalTarget {
    pub target_id: TargetId,
    pub canonical_name: String,
    pub member_structures: Vec<String>,
}

/// Canonical target registry shared by every model and stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registry {
    targets: BTreeMap<TargetId, CanonicalTarget>,
    by_structure: HashMap<String, TargetId>,
}

#[derive(Deserialize)]
struct Row {
    target_id: TargetId,
    canonical_name: String,
    members: String,
}

impl Registry {
    /// The shipped 39-target / 106-structure registry.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED).expect("bundled registry is valid")
    }

    /// Parses `target_id,canonical_name,members` CSV with `;`-separated members.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut targets = BTreeMap::new();
        let mut by_structure = HashMap::new();
        for row in rdr.deserialize::<Row>() {
            let row = row?;
            if row.canonical_name.is_empty() {
                return Err(Error::Parse(format!(
                    "target {} has an empty name",
                    row.target_id
                )));
            }
            let members: Vec<String> = row
                .members
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            if members.is_empty() {
                return Err(Error::Parse(format!(
                    "target {} has no member structures",
                    row.target_id
                )));
            }
            for m in &members {
                if let Some(prev) = by_structure.insert(m.clone(), row.target_id) {
                    return Err(Error::Parse(format!(
                        "structure {m} mapped to targets {prev} and {}",
                        row.target_id
                    )));
                }
            }
            let target = CanonicalTarget {
                target_id: row.target_id,
                canonical_name: row.canonical_name,
                member_structures: members,
            };
            if targets.insert(row.target_id, target).is_some() {
                return Err(Error::Parse(format!(
                    "duplicate target id {}",
                    row.target_id
                )));
            }
        }
        if targets.is_empty() {
            return Err(Error::Parse("registry has no targets".into()));
        }
        Ok(Self {
            targets,
            by_structure,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_structures(&self) -> usize {
        self.by_structure.len()
    }

    pub fn get(&self, id: TargetId) -> Option<&CanonicalTarget> {
        self.targets.get(&id)
    }

    pub fn contains(&self, id: TargetId) -> bool {
        self.targets.contains_key(&id)
    }

    pub fn target_of(&self, structure: &str) -> Option<TargetId> {
        self.by_structure.get(structure).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = TargetId> + '_ {
        self.targets.keys().copied()
    }

    pub fn targets(&self) -> impl Iterator<Item = &CanonicalTarget> {
        self.targets.values()
    }
}
