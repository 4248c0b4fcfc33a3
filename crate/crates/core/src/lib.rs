//! Semantic counterfactual explanations for black-box image classifiers.
//!
//! The crate computes minimum-cost concept edit sets between annotated
//! images, orders those edits, and drives an edit-then-classify loop against
//! pluggable classifier, grounding, inpainting and selector services.

pub mod assignment;
pub mod backends;
pub mod concept;
pub mod editplan;
pub mod metrics;
pub mod ordering;
pub mod pipeline;
pub mod taxonomy;

pub use concept::{concept, ConceptId};
pub use editplan::{
    apply_edits, brute_force_edit_set, closest_target, min_edit_set, ConceptAnnotation, Edit, EditKind, EditSet,
    PlanError,
};
pub use ordering::{compute_importance, order_global, order_local_global, ImportanceTable, OrderingStrategy};
pub use pipeline::{classify_consistent, run_batch, run_counterfactual, RunConfig, RunTrace};
pub use taxonomy::{Cost, CostPolicy, DirectedEdit, Taxonomy, TaxonomyError};
