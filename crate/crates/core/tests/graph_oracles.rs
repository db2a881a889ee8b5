use connrsfm_core::graph::*;
use proptest::prelude::*;

fn complete(n: usize, weights: &[u64]) -> MatchGraph {
    let mut rows = vec![vec![0; n]; n];
    let mut k = 0;
    for a in 0..n {
        for b in a + 1..n {
            rows[a][b] = weights[k];
            rows[b][a] = weights[k];
            k += 1;
        }
    }
    MatchGraph::from_weights(&rows).unwrap()
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut out = subsets(n - 1, k);
    for mut s in subsets(n - 1, k - 1) {
        s.push(n - 1);
        out.push(s);
    }
    out
}

fn with_edges(n: usize, edges: Vec<Edge>) -> SelectedSubgraph {
    SelectedSubgraph { n_frames: n, edges }
}

fn total_weight(g: &SelectedSubgraph) -> u64 {
    g.edges.iter().map(|e| e.weight).sum()
}

#[test]
fn k4_tree_matches_all_sixteen_spanning_trees() {
    let g = complete(4, &[7, 3, 11, 5, 2, 13]);
    let edges = g.edges();
    let trees: Vec<SelectedSubgraph> = subsets(edges.len(), 3)
        .into_iter()
        .map(|s| with_edges(4, s.iter().map(|&i| edges[i]).collect()))
        .filter(SelectedSubgraph::is_connected)
        .collect();
    assert_eq!(trees.len(), 16);
    let best = trees.iter().map(total_weight).max().unwrap();
    assert_eq!(total_weight(&max_spanning_tree(&g).unwrap()), best);
}

fn remaining(g: &MatchGraph, sel: &SelectedSubgraph) -> Vec<Edge> {
    g.edges()
        .into_iter()
        .filter(|e| !sel.edges.iter().any(|t| t.id() == e.id()))
        .collect()
}

/// Replays the greedy selection, checking every step against a
/// from-scratch evaluation of all candidate additions, and the final gain
/// against the best `k`-subset.
fn check_against_enumeration(g: &MatchGraph, k: usize) -> Result<(), TestCaseError> {
    let n = g.n_frames();
    let tree = max_spanning_tree(g).unwrap();
    let greedy = greedy_k_esp(g, &tree, k).unwrap();
    prop_assert_eq!(greedy.n_edges(), n - 1 + k);
    prop_assert!(greedy.is_connected());

    let mut replay = tree.clone();
    for step in 0..k {
        let chosen = greedy.edges[n - 1 + step];
        let base = tree_connectivity(&replay);
        let gains: Vec<(Edge, f64)> = remaining(g, &replay)
            .into_iter()
            .map(|e| {
                let mut next = replay.clone();
                next.edges.push(e);
                (e, tree_connectivity(&next) - base)
            })
            .collect();
        let best = gains
            .iter()
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let got = gains.iter().find(|(e, _)| e.id() == chosen.id()).unwrap().1;
        prop_assert!(
            (got - best).abs() <= 1e-9,
            "step {}: gain {} vs best {}",
            step,
            got,
            best
        );
        replay.edges.push(chosen);
    }

    let free = remaining(g, &tree);
    let base = tree_connectivity(&tree);
    let optimum = subsets(free.len(), k)
        .into_iter()
        .map(|s| {
            let mut sel = tree.clone();
            sel.edges.extend(s.iter().map(|&i| free[i]));
            tree_connectivity(&sel) - base
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let achieved = tree_connectivity(&greedy) - base;
    prop_assert!(achieved <= optimum + 1e-9);
    prop_assert!(achieved >= (1.0 - (-1.0f64).exp()) * optimum - 1e-9);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn greedy_matches_enumeration_on_small_graphs(
        n in 3usize..=6,
        weights in prop::collection::vec(0u64..20, 15),
        k_raw in 0usize..=3,
    ) {
        let m = n * (n - 1) / 2;
        // keep a path so the graph stays connected
        let mut w = weights[..m].to_vec();
        let mut idx = 0;
        for a in 0..n {
            for b in a + 1..n {
                if b == a + 1 && w[idx] == 0 {
                    w[idx] = 1;
                }
                idx += 1;
            }
        }
        let g = complete(n, &w);
        let available = g.edges().len() - (n - 1);
        check_against_enumeration(&g, k_raw.min(available))?;
    }

    #[test]
    fn matrix_tree_theorem_on_unit_graphs(n in 2usize..=6, mask in prop::collection::vec(any::<bool>(), 15)) {
        let m = n * (n - 1) / 2;
        let w: Vec<u64> = mask[..m].iter().map(|&b| b as u64).collect();
        let mut rows = vec![vec![0; n]; n];
        let mut k = 0;
        for a in 0..n {
            for b in a + 1..n {
                rows[a][b] = w[k];
                rows[b][a] = w[k];
                k += 1;
            }
        }
        let Ok(g) = MatchGraph::from_weights(&rows) else { return Ok(()) };
        let edges = g.edges();
        let sel = with_edges(n, edges.clone());
        let count = subsets(edges.len(), n - 1)
            .into_iter()
            .filter(|s| with_edges(n, s.iter().map(|&i| edges[i]).collect()).is_connected())
            .count();
        let ld = tree_connectivity(&sel);
        if count == 0 {
            prop_assert_eq!(ld, f64::NEG_INFINITY);
        } else {
            prop_assert!((ld - (count as f64).ln()).abs() <= 1e-9);
        }
    }
}

#[test]
fn k4_unit_single_edge_gain_is_exhaustive_best() {
    let g = complete(4, &[1; 6]);
    let tree = max_spanning_tree(&g).unwrap();
    let one = greedy_k_esp(&g, &tree, 1).unwrap();
    let best = remaining(&g, &tree)
        .into_iter()
        .map(|e| {
            let mut s = tree.clone();
            s.edges.push(e);
            tree_connectivity(&s)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    assert!((tree_connectivity(&one) - best).abs() < 1e-12);
}
