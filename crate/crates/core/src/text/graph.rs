//! Semantic role graphs for single captions.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

/// Self role used by the event node.
pub const ROLE_SELF: usize = 0;
/// Action → event edges.
pub const ROLE_TEMPORAL: usize = 1;
/// Object → action edges.
pub const ROLE_ARG: usize = 2;
/// Smallest role vocabulary every graph file must support.
pub const MIN_ROLES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Event,
    Action,
    Object,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    #[serde(deserialize_with = "id_from_any")]
    pub id: String,
    pub kind: NodeKind,
    /// Token range `[start, end)`.
    pub span: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdge {
    #[serde(deserialize_with = "id_from_any")]
    pub src: String,
    #[serde(deserialize_with = "id_from_any")]
    pub dst: String,
    pub role: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionGraph {
    pub caption_id: String,
    pub clip_id: String,
    pub tokens: Vec<String>,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("caption `{caption}`: empty token list")]
    NoTokens { caption: String },
    #[error("caption `{caption}`: expected exactly one event node, found {found}")]
    EventCount { caption: String, found: usize },
    #[error("caption `{caption}`: duplicate node id `{node}`")]
    DuplicateNode { caption: String, node: String },
    #[error("caption `{caption}`: node `{node}` has invalid span [{start}, {end}) for {tokens} tokens")]
    BadSpan {
        caption: String,
        node: String,
        start: usize,
        end: usize,
        tokens: usize,
    },
    #[error("caption `{caption}`: edge {src} -> {dst} references unknown node `{missing}`")]
    DanglingEdge {
        caption: String,
        src: String,
        dst: String,
        missing: String,
    },
    #[error("caption `{caption}`: edge {src} -> {dst} has role {role}, vocabulary size is {roles}")]
    UnknownRole {
        caption: String,
        src: String,
        dst: String,
        role: usize,
        roles: usize,
    },
    #[error("caption `{caption}`: action node `{node}` is not connected to the event node")]
    DetachedAction { caption: String, node: String },
    #[error("caption `{caption}`: object node `{node}` is not connected to any action node")]
    DetachedObject { caption: String, node: String },
    #[error("caption `{caption}`: edge {src} -> {dst} is a self loop")]
    SelfLoop { caption: String, src: String, dst: String },
}

fn id_from_any<'de, D: serde::Deserializer<'de>>(de: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        Num(u64),
        Str(String),
    }
    Ok(match Id::deserialize(de)? {
        Id::Num(n) => n.to_string(),
        Id::Str(s) => s,
    })
}

/// A validated graph in canonical order: nodes sorted by id, neighbors sorted
/// by node index. Everything downstream of this is independent of the order
/// nodes and edges were stored in.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalGraph {
    pub kinds: Vec<NodeKind>,
    pub spans: Vec<(usize, usize)>,
    /// Role used to gate each node.
    pub gate_roles: Vec<usize>,
    /// Undirected neighbor lists.
    pub neighbors: Vec<Vec<usize>>,
    pub event: usize,
}

impl CanonicalGraph {
    pub fn nodes_of(&self, kind: NodeKind) -> Vec<usize> {
        (0..self.kinds.len()).filter(|&i| self.kinds[i] == kind).collect()
    }
}

impl CaptionGraph {
    pub fn validate(&self, role_count: usize) -> Result<(), GraphError> {
        let caption = || self.caption_id.clone();
        if self.tokens.is_empty() {
            return Err(GraphError::NoTokens { caption: caption() });
        }
        let mut ids = HashSet::new();
        for node in &self.nodes {
            if !ids.insert(node.id.as_str()) {
                return Err(GraphError::DuplicateNode {
                    caption: caption(),
                    node: node.id.clone(),
                });
            }
            let [start, end] = node.span;
            if start >= end || end > self.tokens.len() {
                return Err(GraphError::BadSpan {
                    caption: caption(),
                    node: node.id.clone(),
                    start,
                    end,
                    tokens: self.tokens.len(),
                });
            }
        }
        let events = self.nodes.iter().filter(|n| n.kind == NodeKind::Event).count();
        if events != 1 {
            return Err(GraphError::EventCount {
                caption: caption(),
                found: events,
            });
        }
        let kind_of: BTreeMap<&str, NodeKind> = self.nodes.iter().map(|n| (n.id.as_str(), n.kind)).collect();
        for e in &self.edges {
            for end in [&e.src, &e.dst] {
                if !kind_of.contains_key(end.as_str()) {
                    return Err(GraphError::DanglingEdge {
                        caption: caption(),
                        src: e.src.clone(),
                        dst: e.dst.clone(),
                        missing: end.clone(),
                    });
                }
            }
            if e.src == e.dst {
                return Err(GraphError::SelfLoop {
                    caption: caption(),
                    src: e.src.clone(),
                    dst: e.dst.clone(),
                });
            }
            if e.role >= role_count {
                return Err(GraphError::UnknownRole {
                    caption: caption(),
                    src: e.src.clone(),
                    dst: e.dst.clone(),
                    role: e.role,
                    roles: role_count,
                });
            }
        }
        let connected = |node: &str, other: NodeKind| {
            self.edges.iter().any(|e| {
                (e.src == node && kind_of[e.dst.as_str()] == other) || (e.dst == node && kind_of[e.src.as_str()] == other)
            })
        };
        for node in &self.nodes {
            match node.kind {
                NodeKind::Action if !connected(&node.id, NodeKind::Event) => {
                    return Err(GraphError::DetachedAction {
                        caption: caption(),
                        node: node.id.clone(),
                    })
                }
                NodeKind::Object if !connected(&node.id, NodeKind::Action) => {
                    return Err(GraphError::DetachedObject {
                        caption: caption(),
                        node: node.id.clone(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Validates and puts the graph in canonical order.
    pub fn canonicalize(&self, role_count: usize) -> Result<CanonicalGraph, GraphError> {
        self.validate(role_count)?;
        let mut order: Vec<&GraphNode> = self.nodes.iter().collect();
        order.sort_by(|a, b| a.id.cmp(&b.id));
        let index: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();

        let mut edges: Vec<(usize, usize, usize)> = self
            .edges
            .iter()
            .map(|e| (index[e.src.as_str()], index[e.dst.as_str()], e.role))
            .collect();
        edges.sort_unstable();
        edges.dedup();

        let n = order.len();
        let mut neighbors = vec![Vec::new(); n];
        for &(s, d, _) in &edges {
            neighbors[s].push(d);
            neighbors[d].push(s);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }

        let kinds: Vec<NodeKind> = order.iter().map(|n| n.kind).collect();
        let event = kinds.iter().position(|k| *k == NodeKind::Event).unwrap();
        let gate_roles = (0..n)
            .map(|i| {
                if i == event {
                    return ROLE_SELF;
                }
                edges
                    .iter()
                    .find(|(s, _, _)| *s == i)
                    .or_else(|| edges.iter().find(|(_, d, _)| *d == i))
                    .map_or(ROLE_SELF, |(_, _, r)| *r)
            })
            .collect();
        Ok(CanonicalGraph {
            spans: order.iter().map(|n| (n.span[0], n.span[1])).collect(),
            kinds,
            gate_roles,
            neighbors,
            event,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn minimal() -> CaptionGraph {
        CaptionGraph {
            caption_id: "c0".into(),
            clip_id: "v0".into(),
            tokens: vec!["slice".into(), "the".into(), "onion".into()],
            nodes: vec![
                GraphNode { id: "e".into(), kind: NodeKind::Event, span: [0, 3] },
                GraphNode { id: "a0".into(), kind: NodeKind::Action, span: [0, 1] },
                GraphNode { id: "o0".into(), kind: NodeKind::Object, span: [1, 3] },
            ],
            edges: vec![
                GraphEdge { src: "a0".into(), dst: "e".into(), role: ROLE_TEMPORAL },
                GraphEdge { src: "o0".into(), dst: "a0".into(), role: ROLE_ARG },
            ],
        }
    }

    #[test]
    fn minimal_graph_is_valid() {
        minimal().validate(MIN_ROLES).unwrap();
    }

    #[test]
    fn rejects_missing_event() {
        let mut g = minimal();
        g.nodes.retain(|n| n.kind != NodeKind::Event);
        g.edges.retain(|e| e.dst != "e");
        assert!(matches!(g.validate(3), Err(GraphError::EventCount { found: 0, .. })));
    }

    #[test]
    fn rejects_object_without_action() {
        let mut g = minimal();
        g.edges.retain(|e| e.role != ROLE_ARG);
        assert!(matches!(g.validate(3), Err(GraphError::DetachedObject { node, .. }) if node == "o0"));
    }

    #[test]
    fn rejects_detached_action() {
        let mut g = minimal();
        g.edges.retain(|e| e.role != ROLE_TEMPORAL);
        assert!(matches!(g.validate(3), Err(GraphError::DetachedAction { .. })));
    }

    #[test]
    fn rejects_dangling_edge_and_empty_span() {
        let mut g = minimal();
        g.edges.push(GraphEdge { src: "o9".into(), dst: "a0".into(), role: ROLE_ARG });
        assert!(matches!(g.validate(3), Err(GraphError::DanglingEdge { missing, .. }) if missing == "o9"));

        let mut g = minimal();
        g.nodes[2].span = [2, 2];
        assert!(matches!(g.validate(3), Err(GraphError::BadSpan { .. })));
    }

    #[test]
    fn rejects_unknown_role() {
        let mut g = minimal();
        g.edges[0].role = 3;
        assert!(matches!(g.validate(3), Err(GraphError::UnknownRole { role: 3, .. })));
        g.validate(4).unwrap();
    }

    #[test]
    fn canonical_form_ignores_storage_order() {
        let g = minimal();
        let mut shuffled = g.clone();
        shuffled.nodes.reverse();
        shuffled.edges.reverse();
        assert_eq!(g.canonicalize(3).unwrap(), shuffled.canonicalize(3).unwrap());
    }

    #[test]
    fn gate_roles_follow_outgoing_edges() {
        let c = minimal().canonicalize(3).unwrap();
        // sorted ids: a0, e, o0
        assert_eq!(c.kinds, vec![NodeKind::Action, NodeKind::Event, NodeKind::Object]);
        assert_eq!(c.gate_roles, vec![ROLE_TEMPORAL, ROLE_SELF, ROLE_ARG]);
        assert_eq!(c.neighbors, vec![vec![1, 2], vec![0], vec![0]]);
    }

    #[test]
    fn numeric_ids_are_accepted() {
        let line = r#"{"caption_id":"c","clip_id":"v","tokens":["cut","it"],
            "nodes":[{"id":0,"kind":"event","span":[0,2]},{"id":1,"kind":"action","span":[0,1]},{"id":2,"kind":"object","span":[1,2]}],
            "edges":[{"src":1,"dst":0,"role":1},{"src":2,"dst":1,"role":2}]}"#;
        let g: CaptionGraph = serde_json::from_str(line).unwrap();
        assert_eq!(g.nodes[1].id, "1");
        g.validate(3).unwrap();
    }
}
