//! Concept taxonomy and the edit-cost primitives derived from it.
//!
//! The taxonomy is an undirected weighted graph with a distinguished root.
//! Substitution cost is the shortest-path distance between two concepts;
//! insertion and deletion cost is the distance of a concept to the root.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::{ConceptId, EmptyConcept};
use crate::editplan::EditKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaxonomyError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("concept `{concept}` is not reachable from root `{root}`")]
    DisconnectedGraph { concept: ConceptId, root: ConceptId },
    #[error("line {line}: edge between `{parent}` and `{child}` is declared twice")]
    DuplicateConcept {
        line: usize,
        parent: ConceptId,
        child: ConceptId,
    },
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
}

/// Edit cost with a dedicated infinite sentinel.
///
/// `Infinite` compares greater than every finite value and absorbs addition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cost {
    Finite(u64),
    Infinite,
}

impl Cost {
    pub fn is_finite(self) -> bool {
        matches!(self, Cost::Finite(_))
    }

    pub fn finite(self) -> Option<u64> {
        match self {
            Cost::Finite(v) => Some(v),
            Cost::Infinite => None,
        }
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;

    fn add(self, rhs: Cost) -> Cost {
        match (self, rhs) {
            (Cost::Finite(a), Cost::Finite(b)) => a.checked_add(b).map_or(Cost::Infinite, Cost::Finite),
            _ => Cost::Infinite,
        }
    }
}

impl fmt::Display for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cost::Finite(v) => write!(f, "{v}"),
            Cost::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub parent: ConceptId,
    pub child: ConceptId,
    pub weight: u64,
}

/// Rooted, connected concept graph. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    names: Vec<ConceptId>,
    index: HashMap<ConceptId, usize>,
    adjacency: Vec<Vec<(usize, u64)>>,
    edges: Vec<Edge>,
    root: usize,
    root_distance: Vec<u64>,
    // single-source distance rows, filled lazily
    rows: Vec<OnceLock<Vec<u64>>>,
}

impl Taxonomy {
    /// Parses the edge-list format: one `parent child [weight]` per line,
    /// `#` starts a comment. The parent of the first edge is the root.
    pub fn parse(source: &str) -> Result<Self, TaxonomyError> {
        let mut edges = Vec::new();
        let mut lines = Vec::new();
        for (number, raw) in source.lines().enumerate() {
            let line = number + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = content.split_whitespace().collect();
            if tokens.len() < 2 || tokens.len() > 3 {
                return Err(TaxonomyError::Parse {
                    line,
                    message: format!("expected `parent child [weight]`, got {} fields", tokens.len()),
                });
            }
            let to_concept = |token: &str| {
                ConceptId::new(token).map_err(|EmptyConcept { raw }| TaxonomyError::Parse {
                    line,
                    message: format!("invalid concept {raw:?}"),
                })
            };
            let parent = to_concept(tokens[0])?;
            let child = to_concept(tokens[1])?;
            let weight = match tokens.get(2) {
                None => 1,
                Some(w) => w.parse::<u64>().map_err(|_| TaxonomyError::Parse {
                    line,
                    message: format!("weight must be a non-negative integer, got {w:?}"),
                })?,
            };
            edges.push(Edge { parent, child, weight });
            lines.push(line);
        }
        let root = match edges.first() {
            Some(first) => first.parent.clone(),
            None => {
                return Err(TaxonomyError::Parse {
                    line: 0,
                    message: "document contains no edges".into(),
                })
            }
        };
        Self::build(root, edges, Some(&lines))
    }

    pub fn from_edges(root: ConceptId, edges: Vec<Edge>) -> Result<Self, TaxonomyError> {
        Self::build(root, edges, None)
    }

    fn build(root: ConceptId, edges: Vec<Edge>, lines: Option<&[usize]>) -> Result<Self, TaxonomyError> {
        let mut names = vec![root.clone()];
        let mut index = HashMap::from([(root, 0usize)]);
        let mut intern = |c: &ConceptId, names: &mut Vec<ConceptId>| -> usize {
            *index.entry(c.clone()).or_insert_with(|| {
                names.push(c.clone());
                names.len() - 1
            })
        };
        let mut adjacency: Vec<Vec<(usize, u64)>> = vec![Vec::new()];
        let mut seen = HashSet::new();
        for (pos, edge) in edges.iter().enumerate() {
            let line = lines.map_or(pos + 1, |l| l[pos]);
            if edge.parent == edge.child {
                return Err(TaxonomyError::Parse {
                    line,
                    message: format!("self-loop on `{}`", edge.parent),
                });
            }
            let a = intern(&edge.parent, &mut names);
            let b = intern(&edge.child, &mut names);
            adjacency.resize_with(names.len(), Vec::new);
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(TaxonomyError::DuplicateConcept {
                    line,
                    parent: edge.parent.clone(),
                    child: edge.child.clone(),
                });
            }
            adjacency[a].push((b, edge.weight));
            adjacency[b].push((a, edge.weight));
        }
        // declared root with no edges at all
        adjacency.resize_with(names.len(), Vec::new);

        let root_distance = dijkstra(&adjacency, 0);
        if let Some(orphan) = root_distance.iter().position(|&d| d == u64::MAX) {
            return Err(TaxonomyError::DisconnectedGraph {
                concept: names[orphan].clone(),
                root: names[0].clone(),
            });
        }
        let rows = (0..names.len()).map(|_| OnceLock::new()).collect();
        Ok(Self {
            names,
            index,
            adjacency,
            edges,
            root: 0,
            root_distance,
            rows,
        })
    }

    pub fn root(&self) -> &ConceptId {
        &self.names[self.root]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, c: &ConceptId) -> bool {
        self.index.contains_key(c)
    }

    pub fn concepts(&self) -> impl Iterator<Item = &ConceptId> {
        self.names.iter()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Concepts adjacent to `c` with the connecting edge weight.
    pub fn neighbors(&self, c: &ConceptId) -> Result<Vec<(&ConceptId, u64)>, TaxonomyError> {
        let i = self.lookup(c)?;
        Ok(self.adjacency[i].iter().map(|&(j, w)| (&self.names[j], w)).collect())
    }

    fn lookup(&self, c: &ConceptId) -> Result<usize, TaxonomyError> {
        self.index
            .get(c)
            .copied()
            .ok_or_else(|| TaxonomyError::UnknownConcept(c.to_string()))
    }

    /// Minimum-weight path length between two concepts.
    pub fn distance(&self, a: &ConceptId, b: &ConceptId) -> Result<u64, TaxonomyError> {
        let (i, j) = (self.lookup(a)?, self.lookup(b)?);
        if i == j {
            return Ok(0);
        }
        if i == self.root {
            return Ok(self.root_distance[j]);
        }
        if j == self.root {
            return Ok(self.root_distance[i]);
        }
        // one row per unordered pair's smaller index keeps the cache symmetric
        let (lo, hi) = (i.min(j), i.max(j));
        let row = self.rows[lo].get_or_init(|| dijkstra(&self.adjacency, lo));
        Ok(row[hi])
    }

    pub fn root_distance(&self, c: &ConceptId) -> Result<u64, TaxonomyError> {
        Ok(self.root_distance[self.lookup(c)?])
    }

    pub fn insertion_cost(&self, c: &ConceptId) -> Result<u64, TaxonomyError> {
        self.root_distance(c)
    }

    pub fn deletion_cost(&self, c: &ConceptId) -> Result<u64, TaxonomyError> {
        self.root_distance(c)
    }
}

fn dijkstra(adjacency: &[Vec<(usize, u64)>], source: usize) -> Vec<u64> {
    let mut dist = vec![u64::MAX; adjacency.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0;
    heap.push(Reverse((0u64, source)));
    while let Some(Reverse((d, node))) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &(next, w) in &adjacency[node] {
            let candidate = d.saturating_add(w);
            if candidate < dist[next] {
                dist[next] = candidate;
                heap.push(Reverse((candidate, next)));
            }
        }
    }
    dist
}

/// Breadth-first depth of every concept, ignoring weights.
pub fn hop_depths(t: &Taxonomy) -> HashMap<ConceptId, usize> {
    let mut depth = vec![usize::MAX; t.len()];
    let mut queue = VecDeque::from([t.root]);
    depth[t.root] = 0;
    while let Some(node) = queue.pop_front() {
        for &(next, _) in &t.adjacency[node] {
            if depth[next] == usize::MAX {
                depth[next] = depth[node] + 1;
                queue.push_back(next);
            }
        }
    }
    t.names.iter().cloned().zip(depth).collect()
}

/// A directed edit without a cost, as named in a [`CostPolicy`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DirectedEdit {
    pub kind: EditKind,
    pub source: Option<ConceptId>,
    pub target: Option<ConceptId>,
}

impl DirectedEdit {
    pub fn insert(target: ConceptId) -> Self {
        Self { kind: EditKind::Insert, source: None, target: Some(target) }
    }

    pub fn delete(source: ConceptId) -> Self {
        Self { kind: EditKind::Delete, source: Some(source), target: None }
    }

    pub fn substitute(source: ConceptId, target: ConceptId) -> Self {
        Self { kind: EditKind::Substitute, source: Some(source), target: Some(target) }
    }
}

impl fmt::Display for DirectedEdit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.kind, &self.source, &self.target) {
            (EditKind::Insert, _, Some(t)) => write!(f, "insert {t}"),
            (EditKind::Delete, Some(s), _) => write!(f, "delete {s}"),
            (EditKind::Substitute, Some(s), Some(t)) => write!(f, "substitute {s} {t}"),
            _ => f.write_str("<malformed edit>"),
        }
    }
}

impl FromStr for DirectedEdit {
    type Err = String;

    /// `insert c`, `delete c`, or `substitute a b` (`replace` is accepted).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tokens: Vec<&str> = s.split_whitespace().collect();
        let c = |t: &str| ConceptId::new(t).map_err(|e| e.to_string());
        match tokens.as_slice() {
            [verb, x] if verb.eq_ignore_ascii_case("insert") => Ok(Self::insert(c(x)?)),
            [verb, x] if verb.eq_ignore_ascii_case("delete") => Ok(Self::delete(c(x)?)),
            [verb, a, b]
                if verb.eq_ignore_ascii_case("substitute") || verb.eq_ignore_ascii_case("replace") =>
            {
                Ok(Self::substitute(c(a)?, c(b)?))
            }
            _ => Err(format!("cannot parse edit {s:?}; expected `insert c`, `delete c` or `substitute a b`")),
        }
    }
}

/// Edits that may never be executed; they receive infinite cost.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostPolicy {
    pub nonactionable: BTreeSet<DirectedEdit>,
}

impl CostPolicy {
    pub fn new(nonactionable: impl IntoIterator<Item = DirectedEdit>) -> Self {
        Self { nonactionable: nonactionable.into_iter().collect() }
    }

    pub fn is_actionable(&self, edit: &DirectedEdit) -> bool {
        !self.nonactionable.contains(edit)
    }

    pub fn insertion(&self, t: &Taxonomy, c: &ConceptId) -> Result<Cost, TaxonomyError> {
        let cost = t.insertion_cost(c)?;
        Ok(self.gate(&DirectedEdit::insert(c.clone()), cost))
    }

    pub fn deletion(&self, t: &Taxonomy, c: &ConceptId) -> Result<Cost, TaxonomyError> {
        let cost = t.deletion_cost(c)?;
        Ok(self.gate(&DirectedEdit::delete(c.clone()), cost))
    }

    pub fn substitution(&self, t: &Taxonomy, a: &ConceptId, b: &ConceptId) -> Result<Cost, TaxonomyError> {
        let cost = t.distance(a, b)?;
        Ok(self.gate(&DirectedEdit::substitute(a.clone(), b.clone()), cost))
    }

    fn gate(&self, edit: &DirectedEdit, cost: u64) -> Cost {
        if self.nonactionable.is_empty() || self.is_actionable(edit) {
            Cost::Finite(cost)
        } else {
            Cost::Infinite
        }
    }
}
