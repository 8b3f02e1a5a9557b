//! Weighted directed session graphs.
//!
//! One node per distinct item in first-occurrence order. Every ordered
//! consecutive pair contributes weight 1 to its directed edge, so an
//! edge's weight is the frequency of that transition within the session.
//! Nodes that never see a repeated click (v, v) get an extra self-loop
//! of weight 1; nodes that do keep the frequency-weighted loop instead.

use crate::error::{FgnnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: u32,
}

#[derive(Debug, Clone)]
pub struct SessionGraph {
    /// Distinct item indices, first occurrence first.
    node_items: Vec<usize>,
    edges: Vec<Edge>,
    /// Per node: ids of edges ending at that node, in edge order. Always
    /// contains the node's single self-loop.
    in_edges: Vec<Vec<usize>>,
    /// Node position of the final sequence item.
    last_node: usize,
    sequence_len: usize,
}

/// Construction switches; the default follows the frequency reading of
/// repeated-pair self-loops.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GraphConfig {
    /// Clamp self-loops created by repeated consecutive items to weight 1
    /// instead of keeping their occurrence frequency.
    pub selfloop_clamp: bool,
}

impl SessionGraph {
    /// Build the session graph of an item-index sequence.
    pub fn build(sequence: &[usize]) -> Result<Self> {
        Self::build_with(sequence, GraphConfig::default())
    }

    pub fn build_with(sequence: &[usize], config: GraphConfig) -> Result<Self> {
        if sequence.is_empty() {
            return Err(FgnnError::Contract(
                "cannot build a session graph from an empty sequence".into(),
            ));
        }

        let mut node_items: Vec<usize> = Vec::new();
        let mut node_of = std::collections::HashMap::new();
        for &item in sequence {
            node_of.entry(item).or_insert_with(|| {
                node_items.push(item);
                node_items.len() - 1
            });
        }

        // Count ordered bigrams; edge enumeration order is the first
        // occurrence of each pair, which makes construction a pure
        // function of the sequence.
        let mut edges: Vec<Edge> = Vec::new();
        let mut edge_of = std::collections::HashMap::new();
        for pair in sequence.windows(2) {
            let src = node_of[&pair[0]];
            let dst = node_of[&pair[1]];
            match edge_of.entry((src, dst)) {
                std::collections::hash_map::Entry::Occupied(e) => {
                    let idx: usize = *e.get();
                    edges[idx].weight += 1;
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(edges.len());
                    edges.push(Edge {
                        src,
                        dst,
                        weight: 1,
                    });
                }
            }
        }

        if config.selfloop_clamp {
            for edge in &mut edges {
                if edge.src == edge.dst {
                    edge.weight = 1;
                }
            }
        }

        // Weight-1 self-loop only for nodes that do not already have one.
        for node in 0..node_items.len() {
            if !edge_of.contains_key(&(node, node)) {
                edges.push(Edge {
                    src: node,
                    dst: node,
                    weight: 1,
                });
            }
        }

        let last_node = node_of[sequence.last().unwrap()];
        Self::assemble(node_items, edges, last_node, sequence.len())
    }

    /// Assemble a graph from explicit parts, validating the structural
    /// invariants (distinct nodes, exactly one self-loop per node).
    pub fn from_parts(
        node_items: Vec<usize>,
        edges: Vec<Edge>,
        last_node: usize,
        sequence_len: usize,
    ) -> Result<Self> {
        let n = node_items.len();
        let mut seen = std::collections::HashSet::new();
        for &item in &node_items {
            if !seen.insert(item) {
                return Err(FgnnError::Contract(format!(
                    "duplicate item {item} in node list"
                )));
            }
        }
        if last_node >= n {
            return Err(FgnnError::IndexOutOfRange {
                what: "last_node",
                index: last_node,
                size: n,
            });
        }
        let mut loops = vec![0usize; n];
        for edge in &edges {
            if edge.src >= n || edge.dst >= n {
                return Err(FgnnError::IndexOutOfRange {
                    what: "edge endpoint",
                    index: edge.src.max(edge.dst),
                    size: n,
                });
            }
            if edge.src == edge.dst {
                loops[edge.src] += 1;
            }
        }
        if let Some(node) = loops.iter().position(|&c| c != 1) {
            return Err(FgnnError::Contract(format!(
                "node {node} has {} self-loops, expected exactly 1",
                loops[node]
            )));
        }
        Self::assemble(node_items, edges, last_node, sequence_len)
    }

    fn assemble(
        node_items: Vec<usize>,
        edges: Vec<Edge>,
        last_node: usize,
        sequence_len: usize,
    ) -> Result<Self> {
        let mut in_edges = vec![Vec::new(); node_items.len()];
        for (id, edge) in edges.iter().enumerate() {
            in_edges[edge.dst].push(id);
        }
        Ok(SessionGraph {
            node_items,
            edges,
            in_edges,
            last_node,
            sequence_len,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_items.len()
    }

    pub fn node_items(&self) -> &[usize] {
        &self.node_items
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn last_node(&self) -> usize {
        self.last_node
    }

    pub fn sequence_len(&self) -> usize {
        self.sequence_len
    }

    /// Edge ids ending at `node`, in edge enumeration order.
    pub fn in_edge_ids(&self, node: usize) -> &[usize] {
        &self.in_edges[node]
    }

    /// Sources of edges ending at `node`, with weights. Always includes
    /// the node itself through its self-loop.
    pub fn in_neighbors(&self, node: usize) -> Result<Vec<(usize, u32)>> {
        if node >= self.node_count() {
            return Err(FgnnError::IndexOutOfRange {
                what: "in_neighbors node",
                index: node,
                size: self.node_count(),
            });
        }
        Ok(self.in_edges[node]
            .iter()
            .map(|&e| (self.edges[e].src, self.edges[e].weight))
            .collect())
    }

    /// Edge-id groups per destination node; the segmentation used for
    /// attention normalization.
    pub fn in_edge_segments(&self) -> Vec<Vec<usize>> {
        self.in_edges.clone()
    }

    /// Sum of outgoing edge weights per node.
    pub fn out_weight_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.node_count()];
        for edge in &self.edges {
            sums[edge.src] += f64::from(edge.weight);
        }
        sums
    }

    /// DOT-format dump for inspection; `label` maps a node's item index
    /// to its display name.
    pub fn to_dot(&self, label: impl Fn(usize) -> String) -> String {
        let mut out = String::from("digraph session {\n");
        for (node, &item) in self.node_items.iter().enumerate() {
            out.push_str(&format!("  n{node} [label=\"{}\"];\n", label(item)));
        }
        for edge in &self.edges {
            out.push_str(&format!(
                "  n{} -> n{} [label=\"{}\"];\n",
                edge.src, edge.dst, edge.weight
            ));
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge_set(g: &SessionGraph) -> Vec<(usize, usize, u32)> {
        let mut v: Vec<_> = g.edges().iter().map(|e| (e.src, e.dst, e.weight)).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn single_item_is_one_selfloop() {
        let g = SessionGraph::build(&[7]).unwrap();
        assert_eq!(g.node_items(), &[7]);
        assert_eq!(edge_set(&g), vec![(0, 0, 1)]);
        assert_eq!(g.last_node(), 0);
        assert_eq!(g.in_neighbors(0).unwrap(), vec![(0, 1)]);
    }

    #[test]
    fn repeated_transition_accumulates_weight() {
        // [A,B,A,B]: A→B twice, B→A once, plus unit self-loops.
        let g = SessionGraph::build(&[10, 20, 10, 20]).unwrap();
        assert_eq!(g.node_items(), &[10, 20]);
        assert_eq!(
            edge_set(&g),
            vec![(0, 0, 1), (0, 1, 2), (1, 0, 1), (1, 1, 1)]
        );
        assert_eq!(g.last_node(), 1);
        // B→A transition edge precedes A's appended self-loop.
        assert_eq!(g.in_neighbors(0).unwrap(), vec![(1, 1), (0, 1)]);
        assert_eq!(g.in_neighbors(1).unwrap(), vec![(0, 2), (1, 1)]);
    }

    #[test]
    fn consecutive_repeat_keeps_frequency_selfloop() {
        // [A,A,B]: the (A,A) pair is A's self-loop; no extra loop added.
        let g = SessionGraph::build(&[3, 3, 4]).unwrap();
        assert_eq!(edge_set(&g), vec![(0, 0, 1), (0, 1, 1), (1, 1, 1)]);

        // [A,A,A,B] under clamping collapses the double loop to 1.
        let g = SessionGraph::build(&[3, 3, 3, 4]).unwrap();
        assert_eq!(edge_set(&g), vec![(0, 0, 2), (0, 1, 1), (1, 1, 1)]);
        let clamped = SessionGraph::build_with(
            &[3, 3, 3, 4],
            GraphConfig {
                selfloop_clamp: true,
            },
        )
        .unwrap();
        assert_eq!(edge_set(&clamped), vec![(0, 0, 1), (0, 1, 1), (1, 1, 1)]);
    }

    #[test]
    fn two_node_in_neighbors() {
        let g = SessionGraph::build(&[1, 2]).unwrap();
        assert_eq!(g.in_neighbors(1).unwrap(), vec![(0, 1), (1, 1)]);
        assert!(matches!(
            g.in_neighbors(5),
            Err(FgnnError::IndexOutOfRange { index: 5, .. })
        ));
    }

    #[test]
    fn empty_sequence_is_a_contract_error() {
        assert!(matches!(
            SessionGraph::build(&[]),
            Err(FgnnError::Contract(_))
        ));
    }

    #[test]
    fn duplicate_sequences_share_nodes_but_not_weights() {
        let a = SessionGraph::build(&[1, 2]).unwrap();
        let b = SessionGraph::build(&[1, 2, 1, 2]).unwrap();
        assert_eq!(a.node_items(), b.node_items());
        assert_ne!(edge_set(&a), edge_set(&b));
    }

    #[test]
    fn dot_dump_names_nodes_and_weights() {
        let g = SessionGraph::build(&[1, 2, 1]).unwrap();
        let dot = g.to_dot(|item| format!("item{item}"));
        assert!(dot.contains("n0 [label=\"item1\"]"));
        assert!(dot.contains("n0 -> n1 [label=\"1\"]"));
        assert!(dot.starts_with("digraph session {"));
    }

    #[test]
    fn from_parts_rejects_missing_selfloop() {
        let err = SessionGraph::from_parts(
            vec![5, 6],
            vec![Edge {
                src: 0,
                dst: 1,
                weight: 1,
            }],
            1,
            2,
        );
        assert!(err.is_err());
    }

    #[test]
    fn nonloop_weight_conserves_transitions() {
        // Without consecutive repeats the non-self-loop weight is n−1.
        let seq = [4, 9, 2, 4, 9];
        let g = SessionGraph::build(&seq).unwrap();
        let non_loop: u32 = g
            .edges()
            .iter()
            .filter(|e| e.src != e.dst)
            .map(|e| e.weight)
            .sum();
        assert_eq!(non_loop as usize, seq.len() - 1);
    }
}
