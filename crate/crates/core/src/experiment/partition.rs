//! Splits questions by the correctness pattern of an identity pair.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// S1 both correct, S2 both wrong, S3 only ID1 correct, S4 only ID2 correct.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetPartition {
    pub s1: BTreeSet<String>,
    pub s2: BTreeSet<String>,
    pub s3: BTreeSet<String>,
    pub s4: BTreeSet<String>,
}

impl SubsetPartition {
    pub fn total(&self) -> usize {
        self.s1.len() + self.s2.len() + self.s3.len() + self.s4.len()
    }

    pub fn get(&self, name: &str) -> Result<&BTreeSet<String>> {
        match name.to_ascii_lowercase().as_str() {
            "s1" => Ok(&self.s1),
            "s2" => Ok(&self.s2),
            "s3" => Ok(&self.s3),
            "s4" => Ok(&self.s4),
            _ => Err(Error::Usage(format!("unknown subset `{name}`, expected s1..s4"))),
        }
    }
}

/// Partitions by per-question is-max flags of ID1 and ID2.
pub fn partition_subsets(
    eval_id1: &BTreeMap<String, bool>,
    eval_id2: &BTreeMap<String, bool>,
) -> Result<SubsetPartition> {
    if eval_id1.len() != eval_id2.len() || eval_id1.keys().any(|k| !eval_id2.contains_key(k)) {
        return Err(Error::Input("identity evaluations cover different questions".into()));
    }
    let mut p = SubsetPartition::default();
    for (q, &a) in eval_id1 {
        let b = eval_id2[q];
        let set = match (a, b) {
            (true, true) => &mut p.s1,
            (false, false) => &mut p.s2,
            (true, false) => &mut p.s3,
            (false, true) => &mut p.s4,
        };
        set.insert(q.clone());
    }
    Ok(p)
}

/// Partition of one pair, as persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPartition {
    pub schema_version: u32,
    pub id1: String,
    pub id2: String,
    #[serde(flatten)]
    pub subsets: SubsetPartition,
}
