use std::collections::BTreeSet;

use cfedit::taxonomy::Edge;
use cfedit::{concept, ConceptId, Taxonomy, TaxonomyError};
use proptest::prelude::*;

/// Random tree on `n` nodes plus a few extra edges, as (u, v, w) with u < v.
fn arb_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize, u64)>)> {
    (2usize..=8).prop_flat_map(|n| {
        let tree = prop::collection::vec((any::<prop::sample::Index>(), 1u64..=4), n - 1);
        let extra = prop::collection::vec((0..n, 0..n, 1u64..=4), 0..4);
        (Just(n), tree, extra).prop_map(|(n, tree, extra)| {
            let mut edges: Vec<(usize, usize, u64)> = Vec::new();
            let mut seen = BTreeSet::new();
            for (child, (parent, w)) in (1..n).zip(tree) {
                let p = parent.index(child);
                seen.insert((p, child));
                edges.push((p, child, w));
            }
            for (a, b, w) in extra {
                let (u, v) = (a.min(b), a.max(b));
                if u != v && seen.insert((u, v)) {
                    edges.push((u, v, w));
                }
            }
            (n, edges)
        })
    })
}

fn name(i: usize) -> ConceptId {
    concept(&format!("c{i}"))
}

/// Minimum over all simple paths by exhaustive search.
fn all_paths_min(n: usize, edges: &[(usize, usize, u64)], from: usize, to: usize) -> u64 {
    fn go(at: usize, to: usize, adj: &[Vec<(usize, u64)>], visited: &mut Vec<bool>, acc: u64, best: &mut u64) {
        if at == to {
            *best = (*best).min(acc);
            return;
        }
        for &(next, w) in &adj[at] {
            if !visited[next] {
                visited[next] = true;
                go(next, to, adj, visited, acc + w, best);
                visited[next] = false;
            }
        }
    }
    let mut adj = vec![Vec::new(); n];
    for &(u, v, w) in edges {
        adj[u].push((v, w));
        adj[v].push((u, w));
    }
    let mut visited = vec![false; n];
    visited[from] = true;
    let mut best = u64::MAX;
    go(from, to, &adj, &mut visited, 0, &mut best);
    best
}

proptest! {
    #[test]
    fn distances_match_exhaustive_paths((n, edges) in arb_graph()) {
        let t = Taxonomy::from_edges(
            name(0),
            edges.iter().map(|&(u, v, w)| Edge { parent: name(u), child: name(v), weight: w }).collect(),
        ).unwrap();
        for a in 0..n {
            for b in 0..n {
                prop_assert_eq!(t.distance(&name(a), &name(b)).unwrap(), all_paths_min(n, &edges, a, b));
            }
            prop_assert_eq!(t.insertion_cost(&name(a)).unwrap(), all_paths_min(n, &edges, 0, a));
            prop_assert_eq!(t.deletion_cost(&name(a)).unwrap(), t.insertion_cost(&name(a)).unwrap());
        }
    }

    #[test]
    fn distance_is_a_metric((n, edges) in arb_graph()) {
        let t = Taxonomy::from_edges(
            name(0),
            edges.iter().map(|&(u, v, w)| Edge { parent: name(u), child: name(v), weight: w }).collect(),
        ).unwrap();
        for a in 0..n {
            prop_assert_eq!(t.distance(&name(a), &name(a)).unwrap(), 0);
            for b in 0..n {
                let ab = t.distance(&name(a), &name(b)).unwrap();
                prop_assert_eq!(ab, t.distance(&name(b), &name(a)).unwrap());
                for c in 0..n {
                    prop_assert!(ab <= t.distance(&name(a), &name(c)).unwrap() + t.distance(&name(c), &name(b)).unwrap());
                }
            }
        }
    }
}

#[test]
fn furniture_file() {
    let t = Taxonomy::parse("root furniture\nfurniture chair\nfurniture couch\n").unwrap();
    assert_eq!(t.len(), 4);
    assert_eq!(t.distance(&concept("chair"), &concept("couch")).unwrap(), 2);
    assert_eq!(t.insertion_cost(&concept("chair")).unwrap(), 2);
}

#[test]
fn malformed_files() {
    assert!(matches!(Taxonomy::parse("root a\nb c\n"), Err(TaxonomyError::DisconnectedGraph { .. })));
    assert!(matches!(Taxonomy::parse("root a\na root\n"), Err(TaxonomyError::DuplicateConcept { line: 2, .. })));
    assert!(matches!(Taxonomy::parse("root a -1\n"), Err(TaxonomyError::Parse { line: 1, .. })));
    assert!(matches!(Taxonomy::parse("# nothing\n"), Err(TaxonomyError::Parse { .. })));
    let t = Taxonomy::parse("root a\n").unwrap();
    assert!(matches!(t.distance(&concept("a"), &concept("zebra")), Err(TaxonomyError::UnknownConcept(_))));
}
