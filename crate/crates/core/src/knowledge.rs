//! Concept taxonomy, per-layer graph contexts and sentence-concept
//! connection vectors.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KsatError, Result};

const DEFAULT_TAXONOMY: &str = include_str!("../data/cssrs_taxonomy.json");

/// Upper bound on concepts; the outcome map is enumerated over all 2^K
/// assignments.
pub const MAX_CONCEPTS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: usize,
    pub name: String,
    pub query_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Outcome {
    IndicationOrNone,
    Ideation1,
    Ideation2,
    BehaviorOrAttempt,
}

impl Outcome {
    /// Display order, which is also the layer stacking order.
    pub const ALL: [Outcome; 4] = [
        Outcome::IndicationOrNone,
        Outcome::Ideation1,
        Outcome::Ideation2,
        Outcome::BehaviorOrAttempt,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Outcome::IndicationOrNone => "IndicationOrNone",
            Outcome::Ideation1 => "Ideation1",
            Outcome::Ideation2 => "Ideation2",
            Outcome::BehaviorOrAttempt => "BehaviorOrAttempt",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Outcome {
    type Err = KsatError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| KsatError::InvalidData(format!("unknown outcome `{s}`")))
    }
}

/// Binary sentence-concept indicator, ordered by concept id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct ConnectionVector(Vec<u8>);

impl ConnectionVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(KsatError::InvalidData(format!(
                "connection vector entries must be 0 or 1, found {b}"
            )));
        }
        Ok(Self(bits))
    }

    pub fn from_bools(bits: impl IntoIterator<Item = bool>) -> Self {
        Self(bits.into_iter().map(u8::from).collect())
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0; len])
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![1; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    /// `"101"`-style rendering in concept-id order.
    pub fn to_bitstring(&self) -> String {
        self.0.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect()
    }
}

impl TryFrom<Vec<u8>> for ConnectionVector {
    type Error = KsatError;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        Self::new(bits)
    }
}

impl From<ConnectionVector> for Vec<u8> {
    fn from(v: ConnectionVector) -> Self {
        v.0
    }
}

/// Restricts a full presence vector to a layer's concept subset, keeping
/// concept-id order.
pub fn connection_vector(presence: &ConnectionVector, context: &[usize]) -> Result<ConnectionVector> {
    context
        .iter()
        .map(|&id| {
            presence.0.get(id).copied().ok_or_else(|| {
                KsatError::InvalidParameter(format!(
                    "concept id {id} out of range for {} concepts",
                    presence.len()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(ConnectionVector)
}

pub fn hamming_distance(a: &ConnectionVector, b: &ConnectionVector) -> Result<usize> {
    if a.len() != b.len() {
        return Err(KsatError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(a.0.iter().zip(&b.0).filter(|(x, y)| x != y).count())
}

/// On-disk taxonomy layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyFile {
    pub concepts: Vec<Concept>,
    pub outcomes: Vec<Outcome>,
    pub outcome_map: BTreeMap<String, Outcome>,
    pub layer_contexts: BTreeMap<Outcome, Vec<usize>>,
}

/// Ordered concepts plus the tree mapping concept assignments to outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeTree {
    concepts: Vec<Concept>,
    // Indexed by the assignment read as a little-endian bit pattern
    // (concept 0 is bit 0).
    outcome_map: Vec<Outcome>,
    layer_contexts: BTreeMap<Outcome, Vec<usize>>,
}

impl KnowledgeTree {
    /// The shipped three-concept CSSRS-style taxonomy.
    pub fn cssrs() -> Self {
        Self::from_json(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TaxonomyFile = serde_json::from_str(text)?;
        Self::try_from(file)
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn layer_order(&self) -> [Outcome; 4] {
        Outcome::ALL
    }

    pub fn context_for_layer(&self, outcome: Outcome) -> &[usize] {
        &self.layer_contexts[&outcome]
    }

    pub fn outcome_for_assignment(&self, assignment: &ConnectionVector) -> Result<Outcome> {
        if assignment.len() != self.num_concepts() {
            return Err(KsatError::DimensionMismatch {
                expected: self.num_concepts(),
                found: assignment.len(),
            });
        }
        let index = assignment
            .bits()
            .iter()
            .enumerate()
            .fold(0usize, |acc, (i, &b)| acc | (usize::from(b) << i));
        Ok(self.outcome_map[index])
    }

    /// Every assignment (in increasing bit-pattern order) that resolves to
    /// `outcome`.
    pub fn assignments_for(&self, outcome: Outcome) -> Vec<ConnectionVector> {
        let k = self.num_concepts();
        self.outcome_map
            .iter()
            .enumerate()
            .filter(|(_, &o)| o == outcome)
            .map(|(index, _)| ConnectionVector::from_bools((0..k).map(|i| index >> i & 1 == 1)))
            .collect()
    }

    pub fn to_file(&self) -> TaxonomyFile {
        let k = self.num_concepts();
        let outcome_map = self
            .outcome_map
            .iter()
            .enumerate()
            .map(|(index, &o)| {
                let key: String = (0..k)
                    .map(|i| if index >> i & 1 == 1 { '1' } else { '0' })
                    .collect();
                (key, o)
            })
            .collect();
        TaxonomyFile {
            concepts: self.concepts.clone(),
            outcomes: Outcome::ALL.to_vec(),
            outcome_map,
            layer_contexts: self.layer_contexts.clone(),
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(&self.to_file()).expect("taxonomy serializes");
        Sha256::digest(&canonical)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

impl TryFrom<TaxonomyFile> for KnowledgeTree {
    type Error = KsatError;

    fn try_from(file: TaxonomyFile) -> Result<Self> {
        let bad = |m: String| Err(KsatError::Taxonomy(m));
        let k = file.concepts.len();
        if k == 0 || k > MAX_CONCEPTS {
            return bad(format!("need 1..={MAX_CONCEPTS} concepts, found {k}"));
        }
        for (i, c) in file.concepts.iter().enumerate() {
            if c.id != i {
                return bad(format!("concept ids must be 0..{k} in order; position {i} has id {}", c.id));
            }
        }
        if file.outcomes != Outcome::ALL {
            return bad("outcomes must be [IndicationOrNone, Ideation1, Ideation2, BehaviorOrAttempt]".into());
        }
        let mut outcome_map = vec![None; 1 << k];
        for (key, &outcome) in &file.outcome_map {
            if key.len() != k || !key.chars().all(|c| c == '0' || c == '1') {
                return bad(format!("outcome_map key `{key}` is not a {k}-bit string"));
            }
            let index = key
                .chars()
                .enumerate()
                .fold(0usize, |acc, (i, c)| acc | (usize::from(c == '1') << i));
            outcome_map[index] = Some(outcome);
        }
        let outcome_map = outcome_map
            .into_iter()
            .enumerate()
            .map(|(index, o)| {
                o.ok_or_else(|| {
                    let key: String = (0..k)
                        .map(|i| if index >> i & 1 == 1 { '1' } else { '0' })
                        .collect();
                    KsatError::Taxonomy(format!("outcome_map missing assignment `{key}`"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut layer_contexts = BTreeMap::new();
        for outcome in Outcome::ALL {
            let Some(ids) = file.layer_contexts.get(&outcome) else {
                return bad(format!("layer_contexts missing {outcome}"));
            };
            let mut ids = ids.clone();
            ids.sort_unstable();
            ids.dedup();
            if ids.is_empty() {
                return bad(format!("layer context for {outcome} is empty"));
            }
            if let Some(id) = ids.iter().find(|&&id| id >= k) {
                return bad(format!("layer context for {outcome} names unknown concept {id}"));
            }
            layer_contexts.insert(outcome, ids);
        }
        Ok(Self {
            concepts: file.concepts,
            outcome_map,
            layer_contexts,
        })
    }
}
