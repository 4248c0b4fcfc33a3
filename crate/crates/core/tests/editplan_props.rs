use cfedit::taxonomy::Edge;
use cfedit::{
    apply_edits, brute_force_edit_set, concept, min_edit_set, ConceptAnnotation, ConceptId, CostPolicy, DirectedEdit,
    EditKind, Taxonomy,
};
use proptest::prelude::*;

fn name(i: usize) -> ConceptId {
    concept(&format!("c{i}"))
}

/// Random rooted tree on up to 8 nodes with weights in 1..=4, and two
/// concept multisets of size at most 5 drawn from its non-root nodes.
fn arb_instance() -> impl Strategy<Value = (Taxonomy, Vec<usize>, Vec<usize>)> {
    (3usize..=8).prop_flat_map(|n| {
        (
            prop::collection::vec((any::<prop::sample::Index>(), 1u64..=4), n - 1),
            prop::collection::vec(1..n, 0..=5),
            prop::collection::vec(1..n, 0..=5),
        )
            .prop_map(move |(tree, src, tgt)| {
                let edges = (1..n)
                    .zip(tree)
                    .map(|(child, (parent, w))| Edge { parent: name(parent.index(child)), child: name(child), weight: w })
                    .collect();
                (Taxonomy::from_edges(name(0), edges).unwrap(), src, tgt)
            })
    })
}

fn ann(id: &str, label: &str, idx: &[usize]) -> ConceptAnnotation {
    ConceptAnnotation::new(id, label, idx.iter().map(|&i| name(i)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn optimal_and_complete((t, s, g) in arb_instance()) {
        let (src, tgt) = (ann("s", "a", &s), ann("g", "b", &g));
        let policy = CostPolicy::default();
        let fast = min_edit_set(&t, &policy, &src, &tgt).unwrap();
        let slow = brute_force_edit_set(&t, &policy, &src, &tgt).unwrap();
        prop_assert_eq!(fast.total_cost, slow.total_cost);
        prop_assert_eq!(fast.len(), slow.len());
        prop_assert_eq!(fast.total_cost, fast.edits.iter().map(|e| e.cost).sum::<u64>());
        prop_assert_eq!(apply_edits(&src, &fast.edits).unwrap().concepts, tgt.concepts.clone());
    }

    #[test]
    fn plan_size_bounds((t, s, g) in arb_instance()) {
        let (src, tgt) = (ann("s", "a", &s), ann("g", "b", &g));
        let plan = min_edit_set(&t, &CostPolicy::default(), &src, &tgt).unwrap();
        prop_assert!(plan.len() <= s.len() + g.len());
        prop_assert!(plan.len() >= s.len().abs_diff(g.len()));
        // no zero-cost edits: they would be identity substitutions
        prop_assert!(plan.edits.iter().all(|e| !(e.kind == EditKind::Substitute && e.source == e.target)));
    }

    #[test]
    fn identical_multisets_need_nothing((t, s, _g) in arb_instance()) {
        let src = ann("s", "a", &s);
        let plan = min_edit_set(&t, &CostPolicy::default(), &src, &ann("g", "b", &s)).unwrap();
        prop_assert!(plan.is_empty());
        prop_assert_eq!(plan.total_cost, 0);
    }

    #[test]
    fn nonactionable_edits_are_avoided((t, s, g) in arb_instance(), banned in 1usize..8) {
        let (src, tgt) = (ann("s", "a", &s), ann("g", "b", &g));
        let policy = CostPolicy::new([DirectedEdit::delete(name(banned))]);
        match (min_edit_set(&t, &policy, &src, &tgt), brute_force_edit_set(&t, &policy, &src, &tgt)) {
            (Ok(fast), Ok(slow)) => {
                prop_assert_eq!(fast.total_cost, slow.total_cost);
                prop_assert!(fast.edits.iter().all(|e| policy.is_actionable(&e.directed())));
                prop_assert_eq!(apply_edits(&src, &fast.edits).unwrap().concepts, tgt.concepts.clone());
            }
            (Err(_), Err(_)) => {}
            (fast, slow) => prop_assert!(false, "solvers disagree on feasibility: {:?} vs {:?}", fast.is_ok(), slow.is_ok()),
        }
    }
}
