use serde::{Deserialize, Serialize};

use crate::datagen::ConversationSample;
use crate::error::{Error, Result};
use crate::numerics::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    Temporal,
    SameSpeaker,
}

/// Directed edge `src -> dst`. Every relation is stored in both directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

/// Utterance graph of one or more conversations. Self-loops are implied by
/// every layer and never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGraph {
    nodes: usize,
    edges: Vec<Edge>,
}

pub const DEFAULT_WINDOW: usize = 4;

impl ConvGraph {
    pub fn new(nodes: usize, mut edges: Vec<Edge>) -> Result<Self> {
        for e in &edges {
            if e.src >= nodes || e.dst >= nodes {
                return Err(Error::Input(format!("edge {e:?} outside a {nodes}-node graph")));
            }
            if e.src == e.dst {
                return Err(Error::Input(format!("self-loop at node {} must not be stored", e.src)));
            }
        }
        edges.sort();
        let before = edges.len();
        edges.dedup();
        if edges.len() != before {
            return Err(Error::Input("duplicate edges".into()));
        }
        Ok(Self { nodes, edges })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Undirected pairs `(i, j)`, `i < j`, of the given kind.
    pub fn pairs(&self, kind: EdgeKind) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .filter(|e| e.kind == kind && e.src < e.dst)
            .map(|e| (e.src, e.dst))
            .collect()
    }

    /// Block-diagonal union; node ids of later graphs are offset.
    pub fn disjoint_union(graphs: &[ConvGraph]) -> Self {
        let mut nodes = 0;
        let mut edges = Vec::new();
        for g in graphs {
            edges.extend(g.edges.iter().map(|e| Edge {
                src: e.src + nodes,
                dst: e.dst + nodes,
                kind: e.kind,
            }));
            nodes += g.nodes;
        }
        Self { nodes, edges }
    }

    /// Dense 0/1 adjacency over both edge kinds, row-major `n×n`.
    pub fn adjacency(&self) -> Vec<bool> {
        let n = self.nodes;
        let mut a = vec![false; n * n];
        for e in &self.edges {
            a[e.dst * n + e.src] = true;
        }
        a
    }

    /// `Â = D^{-1/2} (A + I) D^{-1/2}`.
    pub fn normalized_adjacency(&self) -> Tensor2 {
        let n = self.nodes;
        let mut a = self.adjacency();
        for i in 0..n {
            a[i * n + i] = true;
        }
        let deg: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().filter(|&&x| x).count() as f64).collect();
        let mut out = Tensor2::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if a[i * n + j] {
                    out.set(i, j, 1.0 / (deg[i] * deg[j]).sqrt());
                }
            }
        }
        out
    }

    /// Row `i` marks the in-neighbourhood of `i` plus `i` itself.
    pub fn attention_mask(&self) -> Vec<bool> {
        let n = self.nodes;
        let mut m = self.adjacency();
        for i in 0..n {
            m[i * n + i] = true;
        }
        m
    }
}

/// Temporal edges between utterances at distance `1..=window`, plus an edge
/// from each utterance to the same speaker's previous utterance.
pub fn build_conversation_graph(samples: &[&ConversationSample], window: usize) -> Result<ConvGraph> {
    if samples.windows(2).any(|w| w[0].utterance_index >= w[1].utterance_index) {
        return Err(Error::Input("conversation samples must be sorted by utterance index".into()));
    }
    let n = samples.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n.min(i + window + 1) {
            edges.push(Edge {
                src: i,
                dst: j,
                kind: EdgeKind::Temporal,
            });
            edges.push(Edge {
                src: j,
                dst: i,
                kind: EdgeKind::Temporal,
            });
        }
    }
    let mut last_turn: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        if let Some(&prev) = last_turn.get(&s.speaker_id) {
            edges.push(Edge {
                src: prev,
                dst: i,
                kind: EdgeKind::SameSpeaker,
            });
            edges.push(Edge {
                src: i,
                dst: prev,
                kind: EdgeKind::SameSpeaker,
            });
        }
        last_turn.insert(s.speaker_id, i);
    }
    ConvGraph::new(n, edges)
}

/// A graph with its per-layer adjacency forms precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedGraph {
    pub graph: ConvGraph,
    pub a_hat: Tensor2,
    pub mask: Vec<bool>,
}

impl PreparedGraph {
    pub fn new(graph: ConvGraph) -> Self {
        Self {
            a_hat: graph.normalized_adjacency(),
            mask: graph.attention_mask(),
            graph,
        }
    }

    pub fn nodes(&self) -> usize {
        self.graph.nodes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(speakers: &[u32]) -> Vec<ConversationSample> {
        speakers
            .iter()
            .enumerate()
            .map(|(i, &s)| ConversationSample {
                conversation_id: 0,
                utterance_index: i as u32,
                speaker_id: s,
                label: 0,
                feat_text: vec![],
                feat_audio: vec![],
                feat_visual: vec![],
            })
            .collect()
    }

    fn refs(v: &[ConversationSample]) -> Vec<&ConversationSample> {
        v.iter().collect()
    }

    #[test]
    fn examples() {
        let one = conv(&[0]);
        assert!(build_conversation_graph(&refs(&one), 4).unwrap().edges().is_empty());

        let three = conv(&[0, 1, 2]);
        let g = build_conversation_graph(&refs(&three), 1).unwrap();
        assert_eq!(g.pairs(EdgeKind::Temporal), vec![(0, 1), (1, 2)]);

        let abab = conv(&[0, 1, 0, 1, 2]);
        let g = build_conversation_graph(&refs(&abab), 0).unwrap();
        assert!(g.pairs(EdgeKind::Temporal).is_empty());
        assert_eq!(g.pairs(EdgeKind::SameSpeaker), vec![(0, 2), (1, 3)]);
    }

    #[test]
    fn unsorted_input_is_rejected() {
        let mut v = conv(&[0, 1, 0]);
        v.swap(0, 1);
        assert!(matches!(build_conversation_graph(&refs(&v), 2), Err(Error::Input(_))));
    }

    #[test]
    fn two_node_normalized_adjacency() {
        let g = build_conversation_graph(&refs(&conv(&[0, 1])), 1).unwrap();
        let a = g.normalized_adjacency();
        assert!(a.data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn duplicates_and_self_loops_rejected() {
        let e = Edge {
            src: 0,
            dst: 1,
            kind: EdgeKind::Temporal,
        };
        assert!(ConvGraph::new(2, vec![e, e]).is_err());
        assert!(ConvGraph::new(
            2,
            vec![Edge {
                src: 1,
                dst: 1,
                kind: EdgeKind::Temporal
            }]
        )
        .is_err());
    }
}
