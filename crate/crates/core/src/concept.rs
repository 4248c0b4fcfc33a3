use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("concept name is empty after normalization: {raw:?}")]
pub struct EmptyConcept {
    pub raw: String,
}

/// A normalized concept token.
///
/// Normalization trims the input, lowercases it and collapses internal
/// whitespace runs into a single `_`, so `" Traffic  Light "` and
/// `"traffic_light"` name the same concept.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ConceptId(String);

impl ConceptId {
    pub fn new(raw: &str) -> Result<Self, EmptyConcept> {
        let normalized = normalize(raw);
        if normalized.is_empty() {
            return Err(EmptyConcept { raw: raw.to_string() });
        }
        Ok(Self(normalized))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

pub(crate) fn normalize(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for ConceptId {
    type Error = EmptyConcept;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(&value)
    }
}

impl TryFrom<&str> for ConceptId {
    type Error = EmptyConcept;

    fn try_from(value: &str) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<ConceptId> for String {
    fn from(value: ConceptId) -> Self {
        value.0
    }
}

impl AsRef<str> for ConceptId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Shorthand for building concepts from literals in tests and fixtures.
///
/// Panics on names that normalize to the empty string.
pub fn concept(raw: &str) -> ConceptId {
    ConceptId::new(raw).expect("non-empty concept name")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalizes_case_and_whitespace() {
        assert_eq!(concept("  Chair ").as_str(), "chair");
        assert_eq!(concept("Traffic   Light").as_str(), "traffic_light");
    }

    #[test]
    fn rejects_blank() {
        assert!(ConceptId::new("   ").is_err());
        assert!(ConceptId::new("").is_err());
    }

    #[test]
    fn serde_goes_through_normalization() {
        let c: ConceptId = serde_json::from_str("\" Couch\"").unwrap();
        assert_eq!(c, concept("couch"));
        assert!(serde_json::from_str::<ConceptId>("\"  \"").is_err());
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(raw in "[ a-zA-Z_]{0,16}") {
            let once = normalize(&raw);
            prop_assert_eq!(normalize(&once), once);
        }
    }
}
