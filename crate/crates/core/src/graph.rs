//! The directed intersection network and the neighbor sets that drive the
//! masked attention in P-GAT.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MpgatError, Result};

/// Directed graph over `n` intersections. Self-loops are implied by the
/// adjacency builders and never stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntersectionGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    labels: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphFile {
    n: usize,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
    Global,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Forward, Direction::Backward, Direction::Global];
}

/// Per-node sets of nodes allowed to attend, always containing the node
/// itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectionalAdjacency {
    pub direction: Direction,
    neighbor_sets: Vec<BTreeSet<usize>>,
}

impl DirectionalAdjacency {
    pub fn n(&self) -> usize {
        self.neighbor_sets.len()
    }

    pub fn neighbors(&self, i: usize) -> &BTreeSet<usize> {
        &self.neighbor_sets[i]
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.neighbor_sets[i].contains(&j)
    }

    /// Row-major `N×N` mask, `true` where attention is blocked.
    pub fn blocked_mask(&self) -> Vec<bool> {
        let n = self.n();
        let mut mask = vec![true; n * n];
        for (i, set) in self.neighbor_sets.iter().enumerate() {
            for &j in set {
                mask[i * n + j] = false;
            }
        }
        mask
    }
}

impl IntersectionGraph {
    pub fn new(n: usize, edges: Vec<(usize, usize)>, labels: Option<Vec<String>>) -> Result<Self> {
        if n == 0 {
            return Err(MpgatError::GraphLoad("graph must have at least one node".into()));
        }
        let mut seen = HashSet::new();
        for &(src, dst) in &edges {
            if src >= n || dst >= n {
                return Err(MpgatError::GraphLoad(format!(
                    "edge [{src},{dst}] references a node outside 0..{n}"
                )));
            }
            if src == dst {
                return Err(MpgatError::GraphLoad(format!(
                    "self-loop [{src},{dst}] must not be listed; self-loops are implicit"
                )));
            }
            if !seen.insert((src, dst)) {
                return Err(MpgatError::GraphLoad(format!("duplicate edge [{src},{dst}]")));
            }
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(MpgatError::GraphLoad(format!(
                    "{} labels for {n} nodes",
                    l.len()
                )));
            }
        }
        Ok(Self { n, edges, labels })
    }

    /// Directed path `0 → 1 → … → n−1`.
    pub fn path(n: usize) -> Self {
        let edges = (1..n).map(|i| (i - 1, i)).collect();
        Self::new(n, edges, None).expect("path graph is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)
            .map_err(|e| MpgatError::GraphLoad(format!("cannot parse graph JSON: {e}")))?;
        Self::new(
            file.n,
            file.edges.into_iter().map(|[s, d]| (s, d)).collect(),
            file.labels,
        )
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile {
            n: self.n,
            edges: self.edges.iter().map(|&(s, d)| [s, d]).collect(),
            labels: self.labels.clone(),
        };
        serde_json::to_string_pretty(&file).expect("graph serializes")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn transpose(&self) -> Self {
        Self {
            n: self.n,
            edges: self.edges.iter().map(|&(s, d)| (d, s)).collect(),
            labels: self.labels.clone(),
        }
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let edges = self.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
        Self::new(self.n, edges, None)
    }

    /// Forward: node `i` attends over its in-neighbors. Backward: over its
    /// out-neighbors. Global: over every node.
    pub fn adjacency(&self, direction: Direction) -> DirectionalAdjacency {
        let mut sets: Vec<BTreeSet<usize>> = (0..self.n).map(|i| BTreeSet::from([i])).collect();
        match direction {
            Direction::Forward => {
                for &(src, dst) in &self.edges {
                    sets[dst].insert(src);
                }
            }
            Direction::Backward => {
                for &(src, dst) in &self.edges {
                    sets[src].insert(dst);
                }
            }
            Direction::Global => {
                for set in &mut sets {
                    set.extend(0..self.n);
                }
            }
        }
        DirectionalAdjacency {
            direction,
            neighbor_sets: sets,
        }
    }
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<IntersectionGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| MpgatError::GraphLoad(format!("{}: {e}", path.display())))?;
    IntersectionGraph::from_json(&text)
}

pub fn build_adjacency(g: &IntersectionGraph, direction: Direction) -> DirectionalAdjacency {
    g.adjacency(direction)
}

/// Edge list shipped for the six-intersection dataset. The published
/// material only shows the layout pictorially, so this is configuration
/// rather than ground truth; override it with `--graph`.
pub const DEFAULT_SIX_INTERSECTION_GRAPH: &str = include_str!("../data/graph_6_intersections.json");

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(xs: &[usize]) -> BTreeSet<usize> {
        xs.iter().copied().collect()
    }

    #[test]
    fn loads_two_node_graph() {
        let g = IntersectionGraph::from_json(r#"{"n":2,"edges":[[0,1]]}"#).unwrap();
        assert_eq!(g.n(), 2);
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn rejects_out_of_range_edge() {
        let err = IntersectionGraph::from_json(r#"{"n":2,"edges":[[0,5]]}"#).unwrap_err();
        assert!(err.to_string().contains("outside"), "{err}");
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(IntersectionGraph::from_json(r#"{"n":2,"edges":[[0,1],[0,1]]}"#).is_err());
        assert!(IntersectionGraph::from_json(r#"{"n":2,"edges":[[1,1]]}"#).is_err());
        assert!(IntersectionGraph::from_json("{not json").is_err());
    }

    #[test]
    fn default_graph_has_six_nodes() {
        let g = IntersectionGraph::from_json(DEFAULT_SIX_INTERSECTION_GRAPH).unwrap();
        assert_eq!(g.n(), 6);
        assert_eq!(g.labels().map(|l| l.len()), Some(6));
    }

    #[test]
    fn path_graph_directions() {
        let g = IntersectionGraph::path(3);
        let fwd = g.adjacency(Direction::Forward);
        assert_eq!(fwd.neighbors(0), &set(&[0]));
        assert_eq!(fwd.neighbors(1), &set(&[0, 1]));
        assert_eq!(fwd.neighbors(2), &set(&[1, 2]));
        let bwd = g.adjacency(Direction::Backward);
        assert_eq!(bwd.neighbors(0), &set(&[0, 1]));
        assert_eq!(bwd.neighbors(1), &set(&[1, 2]));
        assert_eq!(bwd.neighbors(2), &set(&[2]));
        let glob = g.adjacency(Direction::Global);
        for i in 0..3 {
            assert_eq!(glob.neighbors(i), &set(&[0, 1, 2]));
        }
    }

    #[test]
    fn blocked_mask_matches_sets() {
        let g = IntersectionGraph::path(3);
        let mask = g.adjacency(Direction::Forward).blocked_mask();
        assert_eq!(
            mask,
            vec![false, true, true, false, false, true, true, false, false]
        );
    }

    fn arb_graph() -> impl Strategy<Value = IntersectionGraph> {
        (1usize..8).prop_flat_map(|n| {
            proptest::collection::btree_set((0..n, 0..n), 0..20).prop_map(move |pairs| {
                let edges = pairs.into_iter().filter(|(s, d)| s != d).collect();
                IntersectionGraph::new(n, edges, None).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn backward_is_forward_of_transpose(g in arb_graph()) {
            prop_assert_eq!(
                g.adjacency(Direction::Backward).neighbor_sets,
                g.transpose().adjacency(Direction::Forward).neighbor_sets
            );
        }

        #[test]
        fn neighbor_sets_contain_self(g in arb_graph()) {
            for dir in Direction::ALL {
                let adj = g.adjacency(dir);
                for i in 0..g.n() {
                    prop_assert!(adj.allows(i, i));
                }
            }
        }

        #[test]
        fn global_is_complete_and_direction_free(g in arb_graph()) {
            let a = g.adjacency(Direction::Global);
            let b = g.transpose().adjacency(Direction::Global);
            prop_assert_eq!(&a.neighbor_sets, &b.neighbor_sets);
            prop_assert!(a.blocked_mask().iter().all(|m| !m));
        }
    }
}
