//! View graph construction and edge selection by tree-connectivity.
//!
//! Tree-connectivity is the log-determinant of the reduced weighted
//! Laplacian. Selection starts from Kruskal's maximum spanning tree and adds
//! extra edges greedily using rank-1 determinant updates.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Gains closer than this are treated as ties and resolved by edge id.
const GAIN_TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("weight matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("weight matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("diagonal weight at {0} must be zero")]
    NonZeroDiagonal(usize),
    #[error("match graph is disconnected; components: {0:?}")]
    Disconnected(Vec<Vec<usize>>),
    #[error("requested {requested} extra edges but only {available} remain")]
    NotEnoughEdges { requested: usize, available: usize },
    #[error("graph needs at least one frame")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: u64,
}

impl Edge {
    /// Builds an edge with `i < j`.
    pub fn new(a: usize, b: usize, weight: u64) -> Self {
        Self {
            i: a.min(b),
            j: a.max(b),
            weight,
        }
    }

    pub fn id(&self) -> (usize, usize) {
        (self.i, self.j)
    }
}

/// Complete weighted view graph; weight = number of co-visible features.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchGraph {
    n: usize,
    weights: Vec<u64>,
}

impl MatchGraph {
    pub fn from_weights(rows: &[Vec<u64>]) -> Result<Self, GraphError> {
        let n = rows.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        if let Some(r) = rows.iter().find(|r| r.len() != n) {
            return Err(GraphError::NotSquare(n, r.len()));
        }
        for a in 0..n {
            if rows[a][a] != 0 {
                return Err(GraphError::NonZeroDiagonal(a));
            }
            for b in a + 1..n {
                if rows[a][b] != rows[b][a] {
                    return Err(GraphError::NotSymmetric(a, b));
                }
            }
        }
        Ok(Self {
            n,
            weights: rows.concat(),
        })
    }

    /// Counts co-visible points for every frame pair from a
    /// `visible[point][frame]` mask.
    pub fn from_visibility(visible: &[Vec<bool>], n_frames: usize) -> Result<Self, GraphError> {
        if n_frames == 0 {
            return Err(GraphError::Empty);
        }
        let mut weights = vec![0u64; n_frames * n_frames];
        for row in visible {
            let seen: Vec<usize> = (0..n_frames)
                .filter(|&f| row.get(f) == Some(&true))
                .collect();
            for (k, &a) in seen.iter().enumerate() {
                for &b in &seen[k + 1..] {
                    weights[a * n_frames + b] += 1;
                    weights[b * n_frames + a] += 1;
                }
            }
        }
        Ok(Self {
            n: n_frames,
            weights,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n
    }

    pub fn weight(&self, a: usize, b: usize) -> u64 {
        self.weights[a * self.n + b]
    }

    /// All positive-weight edges in lexicographic id order.
    pub fn edges(&self) -> Vec<Edge> {
        (0..self.n)
            .flat_map(|a| (a + 1..self.n).map(move |b| (a, b)))
            .filter_map(|(a, b)| {
                let w = self.weight(a, b);
                (w > 0).then(|| Edge::new(a, b, w))
            })
            .collect()
    }

    pub fn max_weight(&self) -> u64 {
        self.weights.iter().copied().max().unwrap_or(0)
    }

    fn components(&self) -> Vec<Vec<usize>> {
        let mut dsu = DisjointSet::new(self.n);
        for e in self.edges() {
            dsu.union(e.i, e.j);
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for v in 0..self.n {
            groups.entry(dsu.find(v)).or_default().push(v);
        }
        let mut out: Vec<_> = groups.into_values().collect();
        out.sort();
        out
    }
}

/// A spanning edge set chosen from a [`MatchGraph`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectedSubgraph {
    pub n_frames: usize,
    pub edges: Vec<Edge>,
}

impl SelectedSubgraph {
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Per-edge solver weight: match count over the largest selected count.
    pub fn omega(&self, edge: usize) -> f64 {
        let max = self.edges.iter().map(|e| e.weight).max().unwrap_or(0);
        if max == 0 {
            0.0
        } else {
            self.edges[edge].weight as f64 / max as f64
        }
    }

    pub fn is_connected(&self) -> bool {
        let mut dsu = DisjointSet::new(self.n_frames);
        let mut merged = 0;
        for e in &self.edges {
            if dsu.union(e.i, e.j) {
                merged += 1;
            }
        }
        merged + 1 == self.n_frames
    }

    fn reduced_laplacian(&self) -> DMatrix<f64> {
        let m = self.n_frames.saturating_sub(1);
        let mut l = DMatrix::zeros(m, m);
        for e in &self.edges {
            let w = e.weight as f64;
            let x = incidence(e, m);
            l += w * &x * x.transpose();
        }
        l
    }
}

/// Reduced incidence vector of an edge with node 0 removed.
fn incidence(e: &Edge, m: usize) -> DVector<f64> {
    let mut x = DVector::zeros(m);
    if e.i > 0 {
        x[e.i - 1] = 1.0;
    }
    if e.j > 0 {
        x[e.j - 1] = -1.0;
    }
    x
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut v: usize) -> usize {
        while self.parent[v] != v {
            self.parent[v] = self.parent[self.parent[v]];
            v = self.parent[v];
        }
        v
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Log-determinant of the reduced weighted Laplacian, or `-inf` when the
/// subgraph does not connect every frame.
pub fn tree_connectivity(g: &SelectedSubgraph) -> f64 {
    if g.n_frames <= 1 {
        return 0.0;
    }
    if !g.is_connected() {
        return f64::NEG_INFINITY;
    }
    match g.reduced_laplacian().cholesky() {
        Some(c) => 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        None => f64::NEG_INFINITY,
    }
}

/// Kruskal's algorithm on positive-weight edges; among equal weights the
/// lexicographically smallest `(i, j)` is taken first.
pub fn max_spanning_tree(g: &MatchGraph) -> Result<SelectedSubgraph, GraphError> {
    let mut edges = g.edges();
    edges.sort_by(|a, b| b.weight.cmp(&a.weight).then(a.id().cmp(&b.id())));
    let mut dsu = DisjointSet::new(g.n_frames());
    let tree: Vec<Edge> = edges.into_iter().filter(|e| dsu.union(e.i, e.j)).collect();
    if tree.len() + 1 != g.n_frames() {
        return Err(GraphError::Disconnected(g.components()));
    }
    Ok(SelectedSubgraph {
        n_frames: g.n_frames(),
        edges: tree,
    })
}

/// Adds `k` edges of `g` to `tree`, each time picking the edge with the
/// largest gain `ln(1 + w xᵀ L⁻¹ x)` in tree-connectivity.
pub fn greedy_k_esp(
    g: &MatchGraph,
    tree: &SelectedSubgraph,
    k: usize,
) -> Result<SelectedSubgraph, GraphError> {
    let mut out = tree.clone();
    let mut remaining: Vec<Edge> = g
        .edges()
        .into_iter()
        .filter(|e| !tree.edges.iter().any(|t| t.id() == e.id()))
        .collect();
    if k > remaining.len() {
        return Err(GraphError::NotEnoughEdges {
            requested: k,
            available: remaining.len(),
        });
    }
    if k == 0 {
        return Ok(out);
    }
    let m = g.n_frames() - 1;
    let mut inv = out
        .reduced_laplacian()
        .try_inverse()
        .ok_or_else(|| GraphError::Disconnected(g.components()))?;
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for (idx, e) in remaining.iter().enumerate() {
            let gain = edge_gain(&inv, e, m);
            if best.is_none_or(|(_, b)| gain > b + GAIN_TIE_TOLERANCE) {
                best = Some((idx, gain));
            }
        }
        let (idx, _) = best.expect("remaining edges checked above");
        let e = remaining.remove(idx);
        // Sherman-Morrison update of the inverse reduced Laplacian
        let x = incidence(&e, m);
        let lx = &inv * &x;
        let denom = 1.0 + e.weight as f64 * x.dot(&lx);
        inv -= (e.weight as f64 / denom) * &lx * lx.transpose();
        out.edges.push(e);
    }
    Ok(out)
}

/// Tree-connectivity gain from adding `e` given the inverse reduced Laplacian.
pub fn edge_gain(inv_laplacian: &DMatrix<f64>, e: &Edge, m: usize) -> f64 {
    let x = incidence(e, m);
    (e.weight as f64 * x.dot(&(inv_laplacian * &x))).ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn complete(n: usize, w: impl Fn(usize, usize) -> u64) -> MatchGraph {
        let rows: Vec<Vec<u64>> = (0..n)
            .map(|a| {
                (0..n)
                    .map(|b| if a == b { 0 } else { w(a.min(b), a.max(b)) })
                    .collect()
            })
            .collect();
        MatchGraph::from_weights(&rows).unwrap()
    }

    #[test]
    fn tree_connectivity_examples() {
        let single = SelectedSubgraph {
            n_frames: 2,
            edges: vec![Edge::new(0, 1, 1)],
        };
        assert_eq!(tree_connectivity(&single), 0.0);
        let path = SelectedSubgraph {
            n_frames: 5,
            edges: (0..4).map(|a| Edge::new(a, a + 1, 1)).collect(),
        };
        assert!(tree_connectivity(&path).abs() < 1e-12);
        let triangle = SelectedSubgraph {
            n_frames: 3,
            edges: vec![Edge::new(0, 1, 1), Edge::new(1, 2, 1), Edge::new(0, 2, 1)],
        };
        assert!((tree_connectivity(&triangle) - 3f64.ln()).abs() < 1e-12);
        let split = SelectedSubgraph {
            n_frames: 3,
            edges: vec![Edge::new(0, 1, 1)],
        };
        assert_eq!(tree_connectivity(&split), f64::NEG_INFINITY);
    }

    #[test]
    fn cayley_formula_for_complete_graphs() {
        // n^(n-2) spanning trees of K_n
        for n in 2..=6usize {
            let g = complete(n, |_, _| 1);
            let all = SelectedSubgraph {
                n_frames: n,
                edges: g.edges(),
            };
            let expected = ((n as f64).powi(n as i32 - 2)).ln();
            assert!((tree_connectivity(&all) - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn spanning_tree_examples() {
        let path =
            MatchGraph::from_weights(&[vec![0, 5, 0], vec![5, 0, 3], vec![0, 3, 0]]).unwrap();
        let t = max_spanning_tree(&path).unwrap();
        assert_eq!(t.edges, vec![Edge::new(0, 1, 5), Edge::new(1, 2, 3)]);

        let tri = MatchGraph::from_weights(&[vec![0, 5, 4], vec![5, 0, 1], vec![4, 1, 0]]).unwrap();
        let t = max_spanning_tree(&tri).unwrap();
        assert_eq!(t.edges, vec![Edge::new(0, 1, 5), Edge::new(0, 2, 4)]);

        let split = MatchGraph::from_weights(&[
            vec![0, 2, 0, 0],
            vec![2, 0, 0, 0],
            vec![0, 0, 0, 1],
            vec![0, 0, 1, 0],
        ])
        .unwrap();
        assert_eq!(
            max_spanning_tree(&split),
            Err(GraphError::Disconnected(vec![vec![0, 1], vec![2, 3]]))
        );
    }

    #[test]
    fn ties_break_lexicographically() {
        let g = complete(4, |_, _| 7);
        let t = max_spanning_tree(&g).unwrap();
        assert_eq!(
            t.edges.iter().map(Edge::id).collect::<Vec<_>>(),
            vec![(0, 1), (0, 2), (0, 3)]
        );
        let extra = greedy_k_esp(&g, &t, 1).unwrap();
        assert_eq!(extra.edges.last().unwrap().id(), (1, 2));
    }

    #[test]
    fn k_zero_is_identity_and_overshoot_errors() {
        let g = complete(4, |a, b| (a + 2 * b) as u64);
        let t = max_spanning_tree(&g).unwrap();
        assert_eq!(greedy_k_esp(&g, &t, 0).unwrap(), t);
        assert!(matches!(
            greedy_k_esp(&g, &t, 4),
            Err(GraphError::NotEnoughEdges { .. })
        ));
    }

    #[test]
    fn invalid_weight_matrices() {
        assert!(matches!(
            MatchGraph::from_weights(&[vec![0, 1], vec![2, 0]]),
            Err(GraphError::NotSymmetric(0, 1))
        ));
        assert!(matches!(
            MatchGraph::from_weights(&[vec![1]]),
            Err(GraphError::NonZeroDiagonal(0))
        ));
        assert!(matches!(
            MatchGraph::from_weights(&[vec![0, 1]]),
            Err(GraphError::NotSquare(..))
        ));
    }

    #[test]
    fn visibility_counts() {
        let vis = vec![
            vec![true, true, false],
            vec![true, true, true],
            vec![false, true, true],
        ];
        let g = MatchGraph::from_visibility(&vis, 3).unwrap();
        assert_eq!((g.weight(0, 1), g.weight(1, 2), g.weight(0, 2)), (2, 2, 1));
    }

    proptest! {
        #[test]
        fn rank_one_gain_matches_recomputed_log_det(
            n in 3usize..=6,
            seed_weights in proptest::collection::vec(1u64..20, 15),
            k in 1usize..=3,
        ) {
            let g = complete(n, |a, b| seed_weights[a * 6 + b - (a + 1) * (a + 2) / 2]);
            let tree = max_spanning_tree(&g).unwrap();
            let k = k.min(g.edges().len() - tree.n_edges());
            let chosen = greedy_k_esp(&g, &tree, k).unwrap();
            prop_assert!(chosen.is_connected());
            prop_assert_eq!(chosen.n_edges(), n - 1 + k);
            let mut prev = tree.clone();
            for e in &chosen.edges[n - 1..] {
                let inv = prev.reduced_laplacian().try_inverse().unwrap();
                let gain = edge_gain(&inv, e, n - 1);
                let mut next = prev.clone();
                next.edges.push(*e);
                let diff = tree_connectivity(&next) - tree_connectivity(&prev);
                prop_assert!((gain - diff).abs() < 1e-9);
                prev = next;
            }
        }
    }
}
