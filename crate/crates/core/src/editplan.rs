//! Minimal concept edit sets between two annotated images.
//!
//! Source concepts and target concepts form the two sides of a bipartite
//! graph. Each side is padded with one dummy node per concept on the other
//! side: pairing a source with its own deletion dummy deletes it, pairing an
//! insertion dummy with its own target inserts it, and dummy-to-dummy pairs
//! are free. A minimum-cost perfect matching of the padded square matrix is
//! a minimum-cost edit set.

use std::collections::HashSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{self, LexCost};
use crate::concept::ConceptId;
use crate::taxonomy::{Cost, CostPolicy, DirectedEdit, Taxonomy, TaxonomyError};

/// Largest per-edit cost accepted by the solver; keeps lexicographic sums
/// far away from `i64` overflow.
pub const MAX_EDIT_COST: u64 = 1 << 48;

/// Largest side accepted by [`brute_force_edit_set`].
pub const BRUTE_FORCE_LIMIT: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("no finite-cost edit set transforms `{source_image}` into `{target_image}`")]
    Infeasible {
        source_image: String,
        target_image: String,
    },
    #[error("instance too large for exhaustive search ({m} x {n}, limit {limit})")]
    TooLarge { m: usize, n: usize, limit: usize },
    #[error("no candidate targets supplied")]
    EmptyCandidates,
    #[error("edit {edit} references `{concept}`, which is not present")]
    MissingSource { edit: String, concept: ConceptId },
    #[error("edit is missing an endpoint: {0}")]
    MalformedEdit(String),
    #[error("edit cost {0} exceeds the supported maximum")]
    CostOverflow(u64),
}

/// An image's identity, class label and concept multiset.
///
/// `concepts` is kept sorted so equal multisets compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "RawAnnotation")]
pub struct ConceptAnnotation {
    pub image_id: String,
    pub label: String,
    pub concepts: Vec<ConceptId>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    image_id: String,
    label: String,
    concepts: Vec<ConceptId>,
}

impl From<RawAnnotation> for ConceptAnnotation {
    fn from(raw: RawAnnotation) -> Self {
        ConceptAnnotation::new(raw.image_id, raw.label, raw.concepts)
    }
}

impl ConceptAnnotation {
    pub fn new(image_id: impl Into<String>, label: impl Into<String>, mut concepts: Vec<ConceptId>) -> Self {
        concepts.sort();
        Self {
            image_id: image_id.into(),
            label: label.into(),
            concepts,
        }
    }

    pub fn count(&self, c: &ConceptId) -> usize {
        self.concepts.iter().filter(|x| *x == c).count()
    }

    pub fn contains(&self, c: &ConceptId) -> bool {
        self.concepts.binary_search(c).is_ok()
    }

    pub fn check_known(&self, t: &Taxonomy) -> Result<(), TaxonomyError> {
        match self.concepts.iter().find(|c| !t.contains(c)) {
            Some(c) => Err(TaxonomyError::UnknownConcept(c.to_string())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Insert,
    Delete,
    Substitute,
}

impl fmt::Display for EditKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EditKind::Insert => "insert",
            EditKind::Delete => "delete",
            EditKind::Substitute => "substitute",
        })
    }
}

/// One concept edit with its taxonomy cost.
///
/// Field order gives the canonical `(kind, source, target)` ordering.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edit {
    pub kind: EditKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<ConceptId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<ConceptId>,
    pub cost: u64,
}

impl Edit {
    pub fn insert(target: ConceptId, cost: u64) -> Self {
        Self { kind: EditKind::Insert, source: None, target: Some(target), cost }
    }

    pub fn delete(source: ConceptId, cost: u64) -> Self {
        Self { kind: EditKind::Delete, source: Some(source), target: None, cost }
    }

    pub fn substitute(source: ConceptId, target: ConceptId, cost: u64) -> Self {
        Self { kind: EditKind::Substitute, source: Some(source), target: Some(target), cost }
    }

    /// Builds an edit of the given shape, costed against the taxonomy.
    pub fn costed(t: &Taxonomy, directed: &DirectedEdit) -> Result<Self, TaxonomyError> {
        Ok(match (directed.kind, &directed.source, &directed.target) {
            (EditKind::Insert, _, Some(c)) => Edit::insert(c.clone(), t.insertion_cost(c)?),
            (EditKind::Delete, Some(c), _) => Edit::delete(c.clone(), t.deletion_cost(c)?),
            (EditKind::Substitute, Some(a), Some(b)) => Edit::substitute(a.clone(), b.clone(), t.distance(a, b)?),
            _ => return Err(TaxonomyError::UnknownConcept(format!("malformed edit {directed}"))),
        })
    }

    pub fn directed(&self) -> DirectedEdit {
        DirectedEdit {
            kind: self.kind,
            source: self.source.clone(),
            target: self.target.clone(),
        }
    }

    /// Same kind and endpoints, ignoring cost.
    pub fn same_action(&self, other: &Edit) -> bool {
        self.kind == other.kind && self.source == other.source && self.target == other.target
    }
}

impl fmt::Display for Edit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (cost {})", self.directed(), self.cost)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSet {
    pub source_image: String,
    pub target_image: String,
    pub edits: Vec<Edit>,
    pub total_cost: u64,
}

impl EditSet {
    pub fn from_edits(source_image: &str, target_image: &str, mut edits: Vec<Edit>) -> Self {
        edits.sort();
        let total_cost = edits.iter().map(|e| e.cost).sum();
        Self {
            source_image: source_image.to_string(),
            target_image: target_image.to_string(),
            edits,
            total_cost,
        }
    }

    pub fn len(&self) -> usize {
        self.edits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }
}

/// Padded bipartite assignment instance.
///
/// Rows are `left` followed by one insertion dummy per `right` concept;
/// columns are `right` followed by one deletion dummy per `left` concept.
/// `weights` is `(m + n) x (n + m)`.
#[derive(Debug, Clone)]
pub struct MatchingProblem {
    pub left: Vec<ConceptId>,
    pub right: Vec<ConceptId>,
    pub weights: Vec<Vec<Cost>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Identity,
    Substitute,
    Delete,
    Insert,
    DummyPair,
    Forbidden,
}

impl MatchingProblem {
    pub fn build(
        t: &Taxonomy,
        policy: &CostPolicy,
        left: Vec<ConceptId>,
        right: Vec<ConceptId>,
    ) -> Result<Self, TaxonomyError> {
        let (m, n) = (left.len(), right.len());
        let size = m + n;
        let mut weights = vec![vec![Cost::Infinite; size]; size];
        for (i, s) in left.iter().enumerate() {
            for (j, r) in right.iter().enumerate() {
                weights[i][j] = if s == r {
                    Cost::Finite(0)
                } else {
                    policy.substitution(t, s, r)?
                };
            }
            weights[i][n + i] = policy.deletion(t, s)?;
        }
        for (j, r) in right.iter().enumerate() {
            weights[m + j][j] = policy.insertion(t, r)?;
            weights[m + j][n..size].fill(Cost::Finite(0));
        }
        Ok(Self { left, right, weights })
    }

    pub fn size(&self) -> usize {
        self.left.len() + self.right.len()
    }

    fn cell(&self, row: usize, col: usize) -> Cell {
        let (m, n) = (self.left.len(), self.right.len());
        match (row < m, col < n) {
            (true, true) if self.left[row] == self.right[col] => Cell::Identity,
            (true, true) => Cell::Substitute,
            (true, false) if col - n == row => Cell::Delete,
            (false, true) if row - m == col => Cell::Insert,
            (false, false) => Cell::DummyPair,
            _ => Cell::Forbidden,
        }
    }

    /// `[infinite pairings, total cost, edit count]`, minimized in that order.
    fn lex_matrix(&self) -> Result<Vec<Vec<LexCost<3>>>, PlanError> {
        let size = self.size();
        let mut out = vec![vec![LexCost([1, 0, 0]); size]; size];
        for (row, out_row) in out.iter_mut().enumerate() {
            for (col, slot) in out_row.iter_mut().enumerate() {
                let cell = self.cell(row, col);
                *slot = match (cell, self.weights[row][col]) {
                    (Cell::Forbidden, _) | (_, Cost::Infinite) => LexCost([1, 0, 0]),
                    (Cell::Identity | Cell::DummyPair, Cost::Finite(_)) => LexCost([0, 0, 0]),
                    (_, Cost::Finite(c)) => {
                        if c > MAX_EDIT_COST {
                            return Err(PlanError::CostOverflow(c));
                        }
                        LexCost([0, c as i64, 1])
                    }
                };
            }
        }
        Ok(out)
    }

    /// Solves the assignment and reads off the edits, or `None` if every
    /// perfect matching uses an infinite pairing.
    pub fn solve(&self) -> Result<Option<Vec<Edit>>, PlanError> {
        let lex = self.lex_matrix()?;
        let assignment = assignment::solve(&lex);
        let total = assignment::total(&lex, &assignment);
        if total.0[0] > 0 {
            return Ok(None);
        }
        let n = self.right.len();
        let mut edits = Vec::new();
        for (row, &col) in assignment.iter().enumerate() {
            let cost = self.weights[row][col].finite().unwrap_or(0);
            match self.cell(row, col) {
                Cell::Substitute => {
                    edits.push(Edit::substitute(self.left[row].clone(), self.right[col].clone(), cost))
                }
                Cell::Delete => edits.push(Edit::delete(self.left[row].clone(), cost)),
                Cell::Insert => edits.push(Edit::insert(self.right[col].clone(), cost)),
                Cell::Identity | Cell::DummyPair => {}
                Cell::Forbidden => unreachable!("forbidden cell {row},{col} (n = {n}) in finite matching"),
            }
        }
        Ok(Some(edits))
    }
}

/// Minimum-cost edit set turning `src.concepts` into `tgt.concepts`.
///
/// Among equal-cost optima, fewer edits win; remaining ties are resolved
/// deterministically from the canonical (sorted) concept order.
pub fn min_edit_set(
    t: &Taxonomy,
    policy: &CostPolicy,
    src: &ConceptAnnotation,
    tgt: &ConceptAnnotation,
) -> Result<EditSet, PlanError> {
    src.check_known(t)?;
    tgt.check_known(t)?;
    let problem = MatchingProblem::build(t, policy, src.concepts.clone(), tgt.concepts.clone())?;
    match problem.solve()? {
        Some(edits) => Ok(EditSet::from_edits(&src.image_id, &tgt.image_id, edits)),
        None => Err(PlanError::Infeasible {
            source_image: src.image_id.clone(),
            target_image: tgt.image_id.clone(),
        }),
    }
}

/// Exhaustive search over every partial injective pairing of source and
/// target concepts, with unpaired sources deleted and unpaired targets
/// inserted. Used as the optimality oracle for [`min_edit_set`].
pub fn brute_force_edit_set(
    t: &Taxonomy,
    policy: &CostPolicy,
    src: &ConceptAnnotation,
    tgt: &ConceptAnnotation,
) -> Result<EditSet, PlanError> {
    let (m, n) = (src.concepts.len(), tgt.concepts.len());
    if m > BRUTE_FORCE_LIMIT || n > BRUTE_FORCE_LIMIT {
        return Err(PlanError::TooLarge { m, n, limit: BRUTE_FORCE_LIMIT });
    }
    src.check_known(t)?;
    tgt.check_known(t)?;

    struct Search<'a> {
        t: &'a Taxonomy,
        policy: &'a CostPolicy,
        left: &'a [ConceptId],
        right: &'a [ConceptId],
        used: Vec<bool>,
        current: Vec<Edit>,
        best: Option<(u64, usize, Vec<Edit>)>,
    }

    impl Search<'_> {
        fn finish(&mut self) -> Result<(), TaxonomyError> {
            let mut edits = self.current.clone();
            for (j, r) in self.right.iter().enumerate() {
                if !self.used[j] {
                    match self.policy.insertion(self.t, r)? {
                        Cost::Finite(c) => edits.push(Edit::insert(r.clone(), c)),
                        Cost::Infinite => return Ok(()),
                    }
                }
            }
            edits.sort();
            let cost: u64 = edits.iter().map(|e| e.cost).sum();
            let candidate = (cost, edits.len(), edits);
            if self.best.as_ref().is_none_or(|b| candidate < *b) {
                self.best = Some(candidate);
            }
            Ok(())
        }

        fn go(&mut self, i: usize) -> Result<(), TaxonomyError> {
            if i == self.left.len() {
                return self.finish();
            }
            let s = &self.left[i];
            if let Cost::Finite(c) = self.policy.deletion(self.t, s)? {
                self.current.push(Edit::delete(s.clone(), c));
                self.go(i + 1)?;
                self.current.pop();
            }
            for j in 0..self.right.len() {
                if self.used[j] {
                    continue;
                }
                let r = &self.right[j];
                let edit = if s == r {
                    None
                } else {
                    match self.policy.substitution(self.t, s, r)? {
                        Cost::Finite(c) => Some(Edit::substitute(s.clone(), r.clone(), c)),
                        Cost::Infinite => continue,
                    }
                };
                self.used[j] = true;
                let pushed = edit.is_some();
                if let Some(e) = edit {
                    self.current.push(e);
                }
                self.go(i + 1)?;
                if pushed {
                    self.current.pop();
                }
                self.used[j] = false;
            }
            Ok(())
        }
    }

    let mut search = Search {
        t,
        policy,
        left: &src.concepts,
        right: &tgt.concepts,
        used: vec![false; n],
        current: Vec::new(),
        best: None,
    };
    search.go(0)?;
    match search.best {
        Some((_, _, edits)) => Ok(EditSet::from_edits(&src.image_id, &tgt.image_id, edits)),
        None => Err(PlanError::Infeasible {
            source_image: src.image_id.clone(),
            target_image: tgt.image_id.clone(),
        }),
    }
}

/// The candidate reachable from `src` with the cheapest edit set.
///
/// Ties go to fewer edits, then the lexicographically smaller `image_id`.
/// Candidates with no finite edit set are skipped.
pub fn closest_target<'c>(
    t: &Taxonomy,
    policy: &CostPolicy,
    src: &ConceptAnnotation,
    candidates: &'c [ConceptAnnotation],
) -> Result<(&'c ConceptAnnotation, EditSet), PlanError> {
    if candidates.is_empty() {
        return Err(PlanError::EmptyCandidates);
    }
    let plans: Vec<Result<EditSet, PlanError>> = candidates
        .par_iter()
        .map(|candidate| min_edit_set(t, policy, src, candidate))
        .collect();
    let mut best: Option<(&ConceptAnnotation, EditSet)> = None;
    for (candidate, plan) in candidates.iter().zip(plans) {
        let plan = match plan {
            Ok(plan) => plan,
            Err(PlanError::Infeasible { .. }) => continue,
            Err(e) => return Err(e),
        };
        let key = (plan.total_cost, plan.len(), candidate.image_id.as_str());
        let better = best
            .as_ref()
            .is_none_or(|(c, p)| key < (p.total_cost, p.len(), c.image_id.as_str()));
        if better {
            best = Some((candidate, plan));
        }
    }
    best.ok_or_else(|| PlanError::Infeasible {
        source_image: src.image_id.clone(),
        target_image: "<all candidates>".into(),
    })
}

/// Applies edits in order to the concept multiset.
pub fn apply_edits(src: &ConceptAnnotation, edits: &[Edit]) -> Result<ConceptAnnotation, PlanError> {
    let mut concepts = src.concepts.clone();
    let take = |c: &ConceptId, edit: &Edit, concepts: &mut Vec<ConceptId>| match concepts.iter().position(|x| x == c) {
        Some(pos) => {
            concepts.remove(pos);
            Ok(())
        }
        None => Err(PlanError::MissingSource {
            edit: edit.directed().to_string(),
            concept: c.clone(),
        }),
    };
    for edit in edits {
        match (edit.kind, &edit.source, &edit.target) {
            (EditKind::Insert, _, Some(target)) => concepts.push(target.clone()),
            (EditKind::Delete, Some(source), _) => take(source, edit, &mut concepts)?,
            (EditKind::Substitute, Some(source), Some(target)) => {
                take(source, edit, &mut concepts)?;
                concepts.push(target.clone());
            }
            _ => return Err(PlanError::MalformedEdit(format!("{edit:?}"))),
        }
    }
    Ok(ConceptAnnotation::new(src.image_id.clone(), src.label.clone(), concepts))
}

/// Whether an edit can be executed against the current multiset.
pub fn is_applicable(current: &ConceptAnnotation, edit: &Edit) -> bool {
    match (edit.kind, &edit.source) {
        (EditKind::Insert, _) => true,
        (_, Some(source)) => current.contains(source),
        _ => false,
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate image id `{0}`")]
    DuplicateImage(String),
    #[error("image `{image_id}`: {source}")]
    UnknownConcept {
        image_id: String,
        #[source]
        source: TaxonomyError,
    },
}

/// Reads one JSON annotation record per line; blank lines are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<ConceptAnnotation>, CorpusError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (number, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ConceptAnnotation = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: number + 1,
            message: e.to_string(),
        })?;
        if !ids.insert(record.image_id.clone()) {
            return Err(CorpusError::DuplicateImage(record.image_id));
        }
        out.push(record);
    }
    Ok(out)
}

/// Rejects annotations that mention concepts absent from the taxonomy.
pub fn validate_corpus(t: &Taxonomy, corpus: &[ConceptAnnotation]) -> Result<(), CorpusError> {
    for a in corpus {
        a.check_known(t).map_err(|source| CorpusError::UnknownConcept {
            image_id: a.image_id.clone(),
            source,
        })?;
    }
    Ok(())
}

pub fn write_corpus(corpus: &[ConceptAnnotation]) -> String {
    corpus
        .iter()
        .map(|a| serde_json::to_string(a).expect("annotation serializes") + "\n")
        .collect()
}
