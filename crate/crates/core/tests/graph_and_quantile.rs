use std::collections::{BTreeMap, BTreeSet};

use divthought::schedule::{build_graph, Dependency, DependencyGraph};
use divthought::uncertainty::alpha_quantile;
use divthought::SubTask;
use proptest::prelude::*;

/// Sort a copy and interpolate at rank (n-1)·α.
fn quantile_oracle(values: &[f64], alpha: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = alpha * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] * (1.0 - (pos - i as f64)) + v[i + 1] * (pos - i as f64)
}

/// Kahn-style check that `order` lists every node once and respects `edges`.
fn is_topological(order: &[usize], nodes: &BTreeSet<usize>, edges: &[Dependency]) -> bool {
    let position: BTreeMap<usize, usize> = order.iter().enumerate().map(|(p, n)| (*n, p)).collect();
    position.len() == order.len()
        && position.keys().copied().collect::<BTreeSet<_>>() == *nodes
        && edges.iter().all(|e| position[&e.from_index] < position[&e.to_index])
}

fn check_graph(k: usize, deps: &[Dependency]) -> DependencyGraph {
    let subtasks: Vec<SubTask> = (1..=k).map(|i| SubTask::new(i, format!("s{i}"))).collect();
    let g = build_graph(&subtasks, deps);
    let nodes: BTreeSet<usize> = (1..=k).collect();

    let flat: Vec<usize> = g.batches.iter().flatten().copied().collect();
    assert_eq!(flat.len(), k);
    assert_eq!(flat.iter().copied().collect::<BTreeSet<_>>(), nodes);

    let batch_of: BTreeMap<usize, usize> =
        g.batches.iter().enumerate().flat_map(|(b, ns)| ns.iter().map(move |n| (*n, b))).collect();
    for e in &g.edges {
        assert!(batch_of[&e.from_index] < batch_of[&e.to_index], "edge {e:?} not forward");
    }
    assert!(is_topological(&flat, &nodes, &g.edges));
    // every kept or removed edge came from the input
    let input: BTreeSet<Dependency> = deps.iter().copied().collect();
    assert!(g.edges.iter().chain(&g.removed).all(|e| input.contains(e)));
    g
}

#[test]
fn quantile_matches_oracle() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2_000 {
        let n = rng.random_range(1..=200);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(1e-9..=1.0)).collect();
        for alpha in [0.0, 0.25, 0.5, 0.8, 1.0] {
            let got = alpha_quantile(&p, alpha).unwrap();
            assert!((got - quantile_oracle(&p, alpha)).abs() < 1e-12);
        }
    }
}

#[test]
fn complete_digraph_becomes_a_chain() {
    let k = 6;
    let deps: Vec<Dependency> = (1..=k)
        .flat_map(|a| (1..=k).filter(move |b| *b != a).map(move |b| Dependency::new(a, b)))
        .collect();
    let g = check_graph(k, &deps);
    assert_eq!(g.batches.len(), k);
}

#[test]
fn empty_edge_set_is_one_batch() {
    let g = check_graph(5, &[]);
    assert_eq!(g.batches, vec![vec![1, 2, 3, 4, 5]]);
}

fn edge_sets() -> impl Strategy<Value = (usize, Vec<Dependency>)> {
    (2usize..10).prop_flat_map(|k| {
        // b = a + shift (mod k) with shift in 1..k never equals a
        let edge = (1..=k, 1..k).prop_map(move |(a, shift)| Dependency::new(a, (a - 1 + shift) % k + 1));
        (Just(k), proptest::collection::vec(edge, 0..40))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn graph_invariants_hold((k, deps) in edge_sets()) {
        check_graph(k, &deps);
    }
}
