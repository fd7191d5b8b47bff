use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::text::{CaptionGraph, GraphEdge, GraphNode, NodeKind, ROLE_ARG, ROLE_TEMPORAL};

fn node(id: String, kind: NodeKind, start: usize, end: usize) -> GraphNode {
    GraphNode {
        id,
        kind,
        span: [start, end],
    }
}

fn edge(src: &str, dst: &str, role: usize) -> GraphEdge {
    GraphEdge {
        src: src.to_string(),
        dst: dst.to_string(),
        role,
    }
}

/// Shallow deterministic parse. Lexicon verbs become action nodes linked to the
/// event node; each maximal run of other tokens becomes an object node linked
/// to the verb before it (a leading run goes to the first verb). With no verb
/// at all, a dummy action spanning the caption carries a single object node.
pub fn rule_parse_caption(
    caption_id: &str,
    clip_id: &str,
    tokens: &[String],
    verbs: &BTreeSet<String>,
) -> Result<CaptionGraph> {
    if tokens.is_empty() {
        return Err(Error::Invalid(format!("caption `{caption_id}` has no tokens")));
    }
    let n = tokens.len();
    let mut nodes = vec![node("e".into(), NodeKind::Event, 0, n)];
    let mut edges = Vec::new();

    let verb_positions: Vec<usize> = (0..n).filter(|&i| verbs.contains(&tokens[i])).collect();
    if verb_positions.is_empty() {
        nodes.push(node("a0".into(), NodeKind::Action, 0, n));
        nodes.push(node("o0".into(), NodeKind::Object, 0, n));
        edges.push(edge("a0", "e", ROLE_TEMPORAL));
        edges.push(edge("o0", "a0", ROLE_ARG));
    } else {
        for (k, &p) in verb_positions.iter().enumerate() {
            let id = format!("a{k}");
            nodes.push(node(id.clone(), NodeKind::Action, p, p + 1));
            edges.push(edge(&id, "e", ROLE_TEMPORAL));
        }
        let mut objects = 0;
        let mut start = None;
        let mut owner = 0;
        let mut close_run = |start: usize, end: usize, owner: usize, nodes: &mut Vec<GraphNode>, edges: &mut Vec<GraphEdge>| {
            let id = format!("o{objects}");
            objects += 1;
            nodes.push(node(id.clone(), NodeKind::Object, start, end));
            edges.push(edge(&id, &format!("a{owner}"), ROLE_ARG));
        };
        let mut verb_seen = 0;
        for i in 0..n {
            if verbs.contains(&tokens[i]) {
                if let Some(s) = start.take() {
                    close_run(s, i, owner, &mut nodes, &mut edges);
                }
                owner = verb_seen;
                verb_seen += 1;
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            close_run(s, n, owner, &mut nodes, &mut edges);
        }
    }
    Ok(CaptionGraph {
        caption_id: caption_id.to_string(),
        clip_id: clip_id.to_string(),
        tokens: tokens.to_vec(),
        nodes,
        edges,
    })
}
