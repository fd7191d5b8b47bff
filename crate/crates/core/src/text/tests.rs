use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{Model, ModelConfig};
use crate::tensor::{finite_diff_check, Precision};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn node(id: &str, kind: NodeKind, span: [usize; 2]) -> GraphNode {
    GraphNode {
        id: id.into(),
        kind,
        span,
    }
}

fn edge(src: &str, dst: &str, role: usize) -> GraphEdge {
    GraphEdge {
        src: src.into(),
        dst: dst.into(),
        role,
    }
}

fn slice_graph() -> CaptionGraph {
    CaptionGraph {
        caption_id: "c0".into(),
        clip_id: "v0".into(),
        tokens: toks("slice the onion"),
        nodes: vec![
            node("e", NodeKind::Event, [0, 3]),
            node("a0", NodeKind::Action, [0, 1]),
            node("o0", NodeKind::Object, [1, 3]),
        ],
        edges: vec![edge("a0", "e", ROLE_TEMPORAL), edge("o0", "a0", ROLE_ARG)],
    }
}

fn two_verb_graph() -> CaptionGraph {
    CaptionGraph {
        caption_id: "c1".into(),
        clip_id: "v0".into(),
        tokens: toks("cut the bread and fry it"),
        nodes: vec![
            node("e", NodeKind::Event, [0, 6]),
            node("a0", NodeKind::Action, [0, 1]),
            node("a1", NodeKind::Action, [4, 5]),
            node("o0", NodeKind::Object, [1, 4]),
            node("o1", NodeKind::Object, [5, 6]),
        ],
        edges: vec![
            edge("a0", "e", ROLE_TEMPORAL),
            edge("a1", "e", ROLE_TEMPORAL),
            edge("o0", "a0", ROLE_ARG),
            edge("o1", "a1", ROLE_ARG),
        ],
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        model_dim: 4,
        word_dim: 3,
        heads: 2,
        ff_dim: 4,
        dim_2d: 3,
        dim_3d: 3,
        dim_roi: 3,
        precision: Precision::F64,
        ..ModelConfig::default()
    }
}

fn small_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::from_tokens(toks("slice the onion cut bread and fry it"));
    let table = EmbeddingTable::random(vocab, 3, &mut rng);
    let mut model = Model::init(small_config(), table, &mut rng).unwrap();
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    model
}

fn value(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).data().to_vec()
}

#[test]
fn embedding_lookup() {
    let model = small_model(1);
    let mut tape = Tape::new(Precision::F64);
    let table = model.params.get(EMBED).unwrap().clone();
    let e = embed_tokens(&mut tape, &model.params, &model.vocab, &toks("onion zebra onion")).unwrap();
    let rows = tape.value(e).clone();
    assert_eq!(rows.shape(), [3, 3]);
    let onion = model.vocab.row_of("onion");
    assert_eq!(rows.row_slice(0), table.row_slice(onion));
    assert_eq!(rows.row_slice(1), table.row_slice(Vocabulary::UNKNOWN_ROW));
    assert_eq!(rows.row_slice(0), rows.row_slice(2));
    assert!(embed_tokens(&mut tape, &model.params, &model.vocab, &[]).is_err());
}

#[test]
fn single_step_lstm_shape() {
    let model = small_model(2);
    let mut tape = Tape::new(Precision::F64);
    let e = embed_tokens(&mut tape, &model.params, &model.vocab, &toks("onion")).unwrap();
    let h = contextualize(&mut tape, &model.params, e).unwrap();
    assert_eq!(tape.shape(h), [1, 4]);
}

#[test]
fn reversal_swaps_directions() {
    let mut model = small_model(3);
    for (f, b) in lstm_names("fwd").iter().zip(lstm_names("bwd")) {
        let w = model.params.get(f).unwrap().data().to_vec();
        model.params.get_mut(&b).unwrap().data_mut().copy_from_slice(&w);
    }
    let words = toks("cut the bread and fry");
    let reversed: Vec<String> = words.iter().rev().cloned().collect();
    let mut tape = Tape::new(Precision::F64);
    let e = embed_tokens(&mut tape, &model.params, &model.vocab, &words).unwrap();
    let h = contextualize(&mut tape, &model.params, e).unwrap();
    let er = embed_tokens(&mut tape, &model.params, &model.vocab, &reversed).unwrap();
    let hr = contextualize(&mut tape, &model.params, er).unwrap();
    let (h, hr) = (tape.value(h).clone(), tape.value(hr).clone());
    let n = words.len();
    for t in 0..n {
        assert_eq!(&h.row_slice(t)[..2], &hr.row_slice(n - 1 - t)[2..]);
        assert_eq!(&h.row_slice(t)[2..], &hr.row_slice(n - 1 - t)[..2]);
    }
}

#[test]
fn zero_lstm_weights_give_zero_states() {
    let mut model = small_model(4);
    for dir in ["fwd", "bwd"] {
        for name in lstm_names(dir) {
            model.params.get_mut(&name).unwrap().data_mut().fill(0.0);
        }
    }
    let mut tape = Tape::new(Precision::F64);
    let e = embed_tokens(&mut tape, &model.params, &model.vocab, &toks("slice the onion")).unwrap();
    let h = contextualize(&mut tape, &model.params, e).unwrap();
    assert!(value(&tape, h).iter().all(|&x| x == 0.0));
}

fn two_token_canon() -> CanonicalGraph {
    CaptionGraph {
        caption_id: "c".into(),
        clip_id: "v".into(),
        tokens: toks("x y"),
        nodes: vec![
            node("e", NodeKind::Event, [0, 2]),
            node("a0", NodeKind::Action, [0, 1]),
            node("o0", NodeKind::Object, [0, 2]),
        ],
        edges: vec![edge("a0", "e", ROLE_TEMPORAL), edge("o0", "a0", ROLE_ARG)],
    }
    .canonicalize(MIN_ROLES)
    .unwrap()
}

#[test]
fn span_max_pool_by_hand() {
    let mut store = ParamStore::new();
    store.insert(ATTN_QUERY, Tensor::new(vec![2, 1], vec![0.3, -0.2]).unwrap());
    let mut tape = Tape::new(Precision::F64);
    let states = tape.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap());
    let canon = two_token_canon();
    let init = init_node_embeddings(&mut tape, &store, states, &canon).unwrap();
    let kinds = &canon.kinds;
    let action = kinds.iter().position(|k| *k == NodeKind::Action).unwrap();
    let object = kinds.iter().position(|k| *k == NodeKind::Object).unwrap();
    assert_eq!(value(&tape, init.nodes[action]), [1.0, 5.0]);
    assert_eq!(value(&tape, init.nodes[object]), [3.0, 5.0]);
    let alpha = value(&tape, init.alpha);
    assert!(alpha.iter().all(|&a| a >= 0.0));
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn single_token_attention_is_identity() {
    let mut store = ParamStore::new();
    store.insert(ATTN_QUERY, Tensor::new(vec![2, 1], vec![0.7, 0.1]).unwrap());
    let graph = CaptionGraph {
        caption_id: "c".into(),
        clip_id: "v".into(),
        tokens: toks("x"),
        nodes: vec![
            node("e", NodeKind::Event, [0, 1]),
            node("a0", NodeKind::Action, [0, 1]),
        ],
        edges: vec![edge("a0", "e", ROLE_TEMPORAL)],
    };
    let canon = graph.canonicalize(MIN_ROLES).unwrap();
    let mut tape = Tape::new(Precision::F64);
    let states = tape.constant(Tensor::row(vec![1.5, -2.0]).unwrap());
    let init = init_node_embeddings(&mut tape, &store, states, &canon).unwrap();
    assert_eq!(value(&tape, init.alpha), [1.0]);
    assert_eq!(value(&tape, init.nodes[canon.event]), [1.5, -2.0]);
}

fn gate_with_column(g: Vec<f64>, column: Vec<f64>) -> Vec<f64> {
    let mut tape = Tape::new(Precision::F64);
    let node = tape.constant(Tensor::row(g).unwrap());
    let d = column.len();
    let mut w = vec![9.0; d * 3];
    for (i, c) in column.iter().enumerate() {
        w[i * 3 + 1] = *c;
    }
    let w_r = tape.constant(Tensor::new(vec![d, 3], w).unwrap());
    let out = role_gate(&mut tape, node, &one_hot(1, 3), w_r).unwrap();
    value(&tape, out)
}

#[test]
fn role_gate_examples() {
    assert_eq!(gate_with_column(vec![2.0, 3.0], vec![0.5, 2.0]), [1.0, 6.0]);
    assert_eq!(gate_with_column(vec![2.0, -3.0], vec![1.0, 1.0]), [2.0, -3.0]);
    assert_eq!(gate_with_column(vec![2.0, -3.0], vec![0.0, 0.0]), [0.0, -0.0]);
}

#[test]
fn role_gate_rejects_non_one_hot() {
    let mut tape = Tape::new(Precision::F64);
    let node = tape.constant(Tensor::row(vec![1.0, 1.0]).unwrap());
    let w_r = tape.constant(Tensor::ones(&[2, 3]));
    assert!(role_gate(&mut tape, node, &[1.0, 1.0, 0.0], w_r).is_err());
    assert!(role_gate(&mut tape, node, &[0.5, 0.0, 0.0], w_r).is_err());
    assert!(role_gate(&mut tape, node, &[0.0, 0.0, 0.0], w_r).is_err());
}

fn rows(tape: &mut Tape, data: &[&[f64]]) -> Vec<Var> {
    data.iter().map(|r| tape.constant(Tensor::row(r.to_vec()).unwrap())).collect()
}

#[test]
fn single_neighbor_update() {
    let mut tape = Tape::new(Precision::F64);
    let nodes = rows(&mut tape, &[&[1.0, 2.0], &[0.5, -1.0]]);
    let w_t = tape.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap());
    let (out, betas) = graph_attention_layer(&mut tape, &nodes, &[vec![1], vec![0]], w_t).unwrap();
    assert_eq!(value(&tape, betas[0].unwrap()), [1.0]);
    // g0 + g1·W_t = [1,2] + [0.5·2 − 1·1, −1·1] = [1, 1]
    assert_eq!(value(&tape, out[0]), [1.0, 1.0]);
}

#[test]
fn zero_transform_is_pure_residual() {
    let mut tape = Tape::new(Precision::F64);
    let nodes = rows(&mut tape, &[&[1.0, 2.0], &[0.5, -1.0], &[3.0, 0.0]]);
    let w_t = tape.constant(Tensor::zeros(&[2, 2]));
    let neighbors = vec![vec![1, 2], vec![0], vec![0]];
    let (out, _) = graph_attention_layer(&mut tape, &nodes, &neighbors, w_t).unwrap();
    for (a, b) in out.iter().zip(&nodes) {
        assert_eq!(value(&tape, *a), value(&tape, *b));
    }
}

#[test]
fn identical_neighbors_split_evenly() {
    let mut tape = Tape::new(Precision::F64);
    let nodes = rows(&mut tape, &[&[1.0, 2.0], &[0.5, -1.0], &[0.5, -1.0]]);
    let w_t = tape.constant(Tensor::eye(2));
    let (_, betas) = graph_attention_layer(&mut tape, &nodes, &[vec![1, 2], vec![0], vec![0]], w_t).unwrap();
    assert_eq!(value(&tape, betas[0].unwrap()), [0.5, 0.5]);
}

#[test]
fn isolated_node_passes_through() {
    let mut tape = Tape::new(Precision::F64);
    let nodes = rows(&mut tape, &[&[1.0, 2.0], &[0.5, -1.0]]);
    let w_t = tape.constant(Tensor::eye(2));
    let (out, betas) = graph_attention_layer(&mut tape, &nodes, &[vec![], vec![]], w_t).unwrap();
    assert!(betas.iter().all(Option::is_none));
    assert_eq!(out, nodes);
}

#[test]
fn attention_weights_are_simplexes() {
    for seed in 0..20 {
        let model = small_model(seed);
        let graph = two_verb_graph();
        let canon = graph.canonicalize(MIN_ROLES).unwrap();
        let mut tape = Tape::new(Precision::F64);
        let e = embed_tokens(&mut tape, &model.params, &model.vocab, &graph.tokens).unwrap();
        let h = contextualize(&mut tape, &model.params, e).unwrap();
        let init = init_node_embeddings(&mut tape, &model.params, h, &canon).unwrap();
        let alpha = value(&tape, init.alpha);
        assert!(alpha.iter().all(|&a| a >= 0.0));
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let w_t = tape.param(&model.params, &gcn_name(0)).unwrap();
        let (_, betas) = graph_attention_layer(&mut tape, &init.nodes, &canon.neighbors, w_t).unwrap();
        for beta in betas.into_iter().flatten() {
            let b = value(&tape, beta);
            assert!(b.iter().all(|&x| x >= 0.0));
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

fn encode(model: &Model, graph: &CaptionGraph) -> crate::LevelEncodings {
    model.text_encodings(graph).unwrap()
}

#[test]
fn storage_order_does_not_matter() {
    let model = small_model(5);
    let graph = two_verb_graph();
    let mut shuffled = graph.clone();
    shuffled.nodes.reverse();
    shuffled.edges.rotate_left(1);
    shuffled.nodes.swap(0, 2);
    assert_eq!(encode(&model, &graph), encode(&model, &shuffled));
}

#[test]
fn single_action_level_is_that_node() {
    let model = small_model(6);
    let graph = slice_graph();
    let canon = graph.canonicalize(MIN_ROLES).unwrap();
    let p = &model.params;
    let mut tape = Tape::new(Precision::F64);
    let e = embed_tokens(&mut tape, p, &model.vocab, &graph.tokens).unwrap();
    let h = contextualize(&mut tape, p, e).unwrap();
    let init = init_node_embeddings(&mut tape, p, h, &canon).unwrap();
    let w_r = tape.param(p, ROLE_GATE).unwrap();
    let mut nodes: Vec<Var> = init
        .nodes
        .iter()
        .zip(&canon.gate_roles)
        .map(|(g, &r)| role_gate(&mut tape, *g, &one_hot(r, MIN_ROLES), w_r).unwrap())
        .collect();
    for layer in 0..2 {
        let w_t = tape.param(p, &gcn_name(layer)).unwrap();
        nodes = graph_attention_layer(&mut tape, &nodes, &canon.neighbors, w_t).unwrap().0;
    }
    let action = canon.nodes_of(NodeKind::Action)[0];
    let object = canon.nodes_of(NodeKind::Object)[0];
    let enc = encode(&model, &graph);
    assert_eq!(enc.action.data(), tape.value(nodes[action]).data());
    assert_eq!(enc.object.data(), tape.value(nodes[object]).data());
    assert_eq!(enc.global.data(), tape.value(nodes[canon.event]).data());
}

#[test]
fn deterministic_replay() {
    let model = small_model(7);
    assert_eq!(encode(&model, &two_verb_graph()), encode(&model, &two_verb_graph()));
}

#[test]
fn zero_parameters_give_zero_encodings() {
    let mut model = small_model(8);
    for (_, t) in model.params.iter_mut() {
        t.data_mut().fill(0.0);
    }
    let enc = encode(&model, &two_verb_graph());
    for level in enc.levels() {
        assert!(level.data().iter().all(|&x| x == 0.0));
    }
    assert_eq!(enc.global.shape(), [1, 4]);
}

#[test]
fn text_gradients_match_finite_differences() {
    let model = small_model(9);
    let mut params = ParamStore::new();
    for (name, t) in model.params.iter().filter(|(n, _)| n.starts_with("text.")) {
        params.insert(name, t.detached());
    }
    let weights = [0.7, -1.3, 0.4];
    let graphs = [slice_graph(), two_verb_graph()];
    let report = finite_diff_check(&mut params, Precision::F64, 1e-5, 1e-4, |store, tape| {
        let mut terms = Vec::new();
        for g in &graphs {
            let levels = encode_text(tape, store, &model.vocab, g, MIN_ROLES, 2)?;
            for (l, w) in weights.iter().enumerate() {
                let s = tape.sum(levels.level(l));
                let sq = tape.mul(s, s)?;
                terms.push(tape.scale(sq, *w));
            }
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = tape.add(total, *t)?;
        }
        Ok::<_, crate::Error>(total)
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
    let checked: Vec<&str> = report.params.iter().map(|p| p.name.as_str()).collect();
    for name in [EMBED, ATTN_QUERY, ROLE_GATE, "text.gcn.0.w_t", "text.gcn.1.w_t", "text.lstm.bwd.w_hh"] {
        assert!(checked.contains(&name), "{name}");
    }
}
