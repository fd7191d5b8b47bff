//! Caption encoder: word vectors → biLSTM → role-gated graph attention →
//! event / action / object embeddings.

mod embedding;
mod graph;

pub use embedding::{EmbeddingTable, Vocabulary};
pub use graph::{
    CanonicalGraph, CaptionGraph, GraphEdge, GraphError, GraphNode, NodeKind, MIN_ROLES, ROLE_ARG, ROLE_SELF,
    ROLE_TEMPORAL,
};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};
use crate::LevelVars;

pub const EMBED: &str = "text.embed";
pub const ATTN_QUERY: &str = "text.attn_query";
pub const ROLE_GATE: &str = "text.role_gate";

pub fn lstm_names(direction: &str) -> [String; 3] {
    [
        format!("text.lstm.{direction}.w_ih"),
        format!("text.lstm.{direction}.w_hh"),
        format!("text.lstm.{direction}.b"),
    ]
}

pub fn gcn_name(layer: usize) -> String {
    format!("text.gcn.{layer}.w_t")
}

/// Node embeddings before the graph layers, plus the soft-attention weights
/// used for the event node.
pub struct NodeInit {
    pub nodes: Vec<Var>,
    pub alpha: Var,
}

/// `T × word_dim` rows of the embedding parameter.
pub fn embed_tokens(tape: &mut Tape, store: &ParamStore, vocab: &Vocabulary, tokens: &[String]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(TensorError::Empty { op: "embed_tokens" }.into());
    }
    let table = tape.param(store, EMBED)?;
    Ok(tape.gather_rows(table, &vocab.rows_of(tokens))?)
}

fn lstm_direction(tape: &mut Tape, store: &ParamStore, steps: &[Var], direction: &str) -> Result<Vec<Var>> {
    let [w_ih, w_hh, b] = lstm_names(direction);
    let w_ih = tape.param(store, &w_ih)?;
    let w_hh = tape.param(store, &w_hh)?;
    let b = tape.param(store, &b)?;
    let hidden = tape.shape(w_hh)[0];
    let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut c = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut out = Vec::with_capacity(steps.len());
    for &x in steps {
        let xi = tape.matmul(x, w_ih)?;
        let hh = tape.matmul(h, w_hh)?;
        let pre = tape.add(xi, hh)?;
        let gates = tape.broadcast_add(pre, b)?;
        let i_pre = tape.slice(gates, 1, 0, hidden)?;
        let f_pre = tape.slice(gates, 1, hidden, 2 * hidden)?;
        let g_pre = tape.slice(gates, 1, 2 * hidden, 3 * hidden)?;
        let o_pre = tape.slice(gates, 1, 3 * hidden, 4 * hidden)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let squashed = tape.tanh(c);
        h = tape.mul(o, squashed)?;
        out.push(h);
    }
    Ok(out)
}

/// Bidirectional LSTM over `T × word_dim` rows. Row `t` of the output is the
/// forward state after step `t` followed by the backward state after reading
/// `t` from the end.
pub fn contextualize(tape: &mut Tape, store: &ParamStore, embedded: Var) -> Result<Var> {
    let steps = tape.shape(embedded)[0];
    let rows: Vec<Var> = (0..steps)
        .map(|t| tape.slice(embedded, 0, t, t + 1))
        .collect::<std::result::Result<_, _>>()?;
    let forward = lstm_direction(tape, store, &rows, "fwd")?;
    let reversed: Vec<Var> = rows.iter().rev().copied().collect();
    let mut backward = lstm_direction(tape, store, &reversed, "bwd")?;
    backward.reverse();
    let joined: Vec<Var> = forward
        .iter()
        .zip(&backward)
        .map(|(f, b)| tape.concat(&[*f, *b], 1))
        .collect::<std::result::Result<_, _>>()?;
    Ok(tape.concat(&joined, 0)?)
}

/// Event node: soft attention over all token states. Action/object nodes:
/// elementwise max over their token span.
pub fn init_node_embeddings(tape: &mut Tape, store: &ParamStore, states: Var, graph: &CanonicalGraph) -> Result<NodeInit> {
    let query = tape.param(store, ATTN_QUERY)?;
    let scores = tape.matmul(states, query)?;
    let alpha = tape.softmax(scores, 0)?;
    let alpha_row = tape.transpose(alpha)?;
    let event = tape.matmul(alpha_row, states)?;
    let mut nodes = Vec::with_capacity(graph.kinds.len());
    for (i, &(start, end)) in graph.spans.iter().enumerate() {
        if i == graph.event {
            nodes.push(event);
        } else {
            let span = tape.slice(states, 0, start, end)?;
            nodes.push(tape.max_axis(span, 0)?);
        }
    }
    Ok(NodeInit { nodes, alpha })
}

/// `g ⊙ (W_r · r)` for a one-hot role vector `r`.
pub fn role_gate(tape: &mut Tape, node: Var, role_onehot: &[f64], w_r: Var) -> Result<Var> {
    let ones = role_onehot.iter().filter(|v| **v == 1.0).count();
    let zeros = role_onehot.iter().filter(|v| **v == 0.0).count();
    if ones != 1 || ones + zeros != role_onehot.len() {
        return Err(Error::Invalid(format!("role vector {role_onehot:?} is not one-hot")));
    }
    let r = tape.constant(Tensor::new(vec![role_onehot.len(), 1], role_onehot.to_vec())?);
    let column = tape.matmul(w_r, r)?;
    let gate = tape.transpose(column)?;
    Ok(tape.mul(node, gate)?)
}

pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// One residual graph-attention update:
/// `g'_i = g_i + (Σ_j β_ij g_j) W_t`, `β_i = softmax_j(g_i·g_j / √d)` over the
/// neighbors of `i`. Nodes without neighbors pass through. Returns the new
/// nodes and each node's attention weights (`None` for isolated nodes).
pub fn graph_attention_layer(
    tape: &mut Tape,
    nodes: &[Var],
    neighbors: &[Vec<usize>],
    w_t: Var,
) -> Result<(Vec<Var>, Vec<Option<Var>>)> {
    let mut updated = Vec::with_capacity(nodes.len());
    let mut betas = Vec::with_capacity(nodes.len());
    for (i, &g) in nodes.iter().enumerate() {
        if neighbors[i].is_empty() {
            updated.push(g);
            betas.push(None);
            continue;
        }
        let dim = tape.shape(g)[1];
        let rows: Vec<Var> = neighbors[i].iter().map(|&j| nodes[j]).collect();
        let stacked = tape.concat(&rows, 0)?;
        let g_col = tape.transpose(g)?;
        let raw = tape.matmul(stacked, g_col)?;
        let scores = tape.scale(raw, 1.0 / (dim as f64).sqrt());
        let beta = tape.softmax(scores, 0)?;
        let beta_row = tape.transpose(beta)?;
        let pooled = tape.matmul(beta_row, stacked)?;
        let message = tape.matmul(pooled, w_t)?;
        updated.push(tape.add(g, message)?);
        betas.push(Some(beta));
    }
    Ok((updated, betas))
}

fn pool_kind(tape: &mut Tape, nodes: &[Var], graph: &CanonicalGraph, kind: NodeKind) -> Result<Var> {
    let picked: Vec<Var> = graph.nodes_of(kind).into_iter().map(|i| nodes[i]).collect();
    if picked.is_empty() {
        return Ok(nodes[graph.event]);
    }
    if picked.len() == 1 {
        return Ok(picked[0]);
    }
    let stacked = tape.concat(&picked, 0)?;
    Ok(tape.max_axis(stacked, 0)?)
}

/// Full caption encoding. Levels with no nodes of their kind fall back to the
/// event embedding.
pub fn encode_text(
    tape: &mut Tape,
    store: &ParamStore,
    vocab: &Vocabulary,
    graph: &CaptionGraph,
    role_count: usize,
    gcn_layers: usize,
) -> Result<LevelVars> {
    let canon = graph.canonicalize(role_count)?;
    let embedded = embed_tokens(tape, store, vocab, &graph.tokens)?;
    let states = contextualize(tape, store, embedded)?;
    let init = init_node_embeddings(tape, store, states, &canon)?;
    let w_r = tape.param(store, ROLE_GATE)?;
    let mut nodes = Vec::with_capacity(init.nodes.len());
    for (g, &role) in init.nodes.iter().zip(&canon.gate_roles) {
        nodes.push(role_gate(tape, *g, &one_hot(role, role_count), w_r)?);
    }
    for layer in 0..gcn_layers {
        let w_t = tape.param(store, &gcn_name(layer))?;
        nodes = graph_attention_layer(tape, &nodes, &canon.neighbors, w_t)?.0;
    }
    Ok(LevelVars {
        global: nodes[canon.event],
        action: pool_kind(tape, &nodes, &canon, NodeKind::Action)?,
        object: pool_kind(tape, &nodes, &canon, NodeKind::Object)?,
    })
}

#[cfg(test)]
mod tests;
