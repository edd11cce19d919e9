import math

import numpy as np
import pytest

from scenegcn import tensor as T
from scenegcn.gradcheck import finite_diff_check
from scenegcn.model import (ConfigError, GraphBatch, SceneGCN, aggregate, bce_loss, edge_concat,
                            graph_conv_fused, graph_conv_update, predict_answers, project_nodes,
                            q_object_attention, qr_self_attention)
from scenegcn.params import ModelParams, add_linear

from conftest import random_graph, random_tokens, scaled_model, single_batch, tiny_config
from oracles import bce_reference, scenegcn_reference

VARIANTS = {
    "scenegcn": dict(),
    "two_heads": dict(heads=2),
    "implicit": dict(implicit=True),
    "q_att": dict(graph_conv=False, gru_layers=2, q_att=True),
    "baseline": dict(graph_conv=False),
}


def numpy_params(model):
    return {k: t.data for k, t in model.params.items()}


# --- stage examples -----------------------------------------------------------------------
def stage_params(d_in=3, d=3, rel=2, d_q=4, heads=1, seed=0):
    rng = np.random.default_rng(seed)
    p = ModelParams()
    add_linear(p, "proj", d_in, d, rng)
    p.add("satt.w_q.weight", rng.normal(size=(d_q, d)))
    p.add("satt.w_r.weight", rng.normal(size=(rel, d)))
    add_linear(p, "satt.score", d, heads, rng)
    p.add("gcn.w.weight", rng.normal(size=(d + rel, d)))
    p.add("oatt.w_q.weight", rng.normal(size=(d_q, d)))
    p.add("oatt.w_h.weight", rng.normal(size=(d, d)))
    add_linear(p, "oatt.score", d, 1, rng)
    return p


def test_project_nodes_identity_and_bias_only():
    p = stage_params()
    h = np.random.default_rng(1).normal(size=(1, 4, 3))
    p["proj.weight"].data[...] = np.eye(3)
    np.testing.assert_array_equal(project_nodes(T.Tensor(h), p).data, h)
    p["proj.weight"].data[...] = 0.0
    p["proj.bias"].data[...] = [1.0, -2.0, 3.0]
    assert (project_nodes(T.Tensor(h), p).data == [1.0, -2.0, 3.0]).all()
    with pytest.raises(T.DimensionError):
        project_nodes(T.Tensor(np.ones((1, 2, 5))), p)


def test_project_nodes_gradient():
    p = stage_params(seed=2)
    h = np.random.default_rng(3).normal(size=(1, 3, 3))
    w = np.random.default_rng(4).normal(size=(1, 3, 3))
    assert finite_diff_check(lambda: T.tsum(project_nodes(T.Tensor(h), p) * w),
                             {"w": p["proj.weight"]}, tol=1e-6).passed


def test_edge_concat_slices():
    rng = np.random.default_rng(5)
    h_p, r = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 3, 3, 2))
    valid = ~np.eye(3, dtype=bool)[None]
    f = edge_concat(T.Tensor(h_p), T.Tensor(r), valid).data
    for j in range(3):
        for i in range(3):
            if i == j:
                assert not f[0, j, i].any()
            else:
                np.testing.assert_array_equal(f[0, j, i, :4], np.maximum(h_p[0, j], 0))
                np.testing.assert_array_equal(f[0, j, i, 4:], r[0, j, i])


def test_self_attention_uniform_when_scores_constant():
    p = stage_params()
    p["satt.score.weight"].data[...] = 0.0
    rng = np.random.default_rng(6)
    n = 4
    valid = ~np.eye(n, dtype=bool)[None]
    omega = qr_self_attention(T.Tensor(rng.normal(size=(1, 4))), T.Tensor(rng.normal(size=(1, n, n, 2))), valid, p).data
    expected = valid[..., None] / (n - 1)
    np.testing.assert_allclose(omega, expected, rtol=0, atol=1e-15)


def test_self_attention_two_nodes_is_one_hot():
    p = stage_params()
    rng = np.random.default_rng(7)
    valid = ~np.eye(2, dtype=bool)[None]
    omega = qr_self_attention(T.Tensor(rng.normal(size=(1, 4))), T.Tensor(rng.normal(size=(1, 2, 2, 2))), valid, p).data
    assert omega[0, 1, 0, 0] == 1.0 and omega[0, 0, 1, 0] == 1.0 and omega[0, 0, 0, 0] == 0.0


def test_single_node_attention_is_empty_and_update_is_residual():
    p = stage_params()
    rng = np.random.default_rng(8)
    valid = np.zeros((1, 1, 1), dtype=bool)
    r = T.Tensor(rng.normal(size=(1, 1, 1, 2)))
    omega = qr_self_attention(T.Tensor(rng.normal(size=(1, 4))), r, valid, p)
    assert not omega.data.any()
    h_p = T.Tensor(rng.normal(size=(1, 1, 3)))
    np.testing.assert_array_equal(graph_conv_fused(h_p, r, omega, p).data, np.maximum(h_p.data, 0))


def test_zero_conv_weights_reduce_to_relu_projection():
    p = stage_params()
    p["gcn.w.weight"].data[...] = 0.0
    rng = np.random.default_rng(9)
    h_p = T.Tensor(rng.normal(size=(1, 3, 3)))
    omega = T.Tensor(rng.dirichlet(np.ones(3), size=(1, 3, 1)).transpose(0, 3, 1, 2))
    f = T.Tensor(rng.normal(size=(1, 3, 3, 5)))
    np.testing.assert_array_equal(graph_conv_update(h_p, f, omega, p).data, np.maximum(h_p.data, 0))


def test_two_node_update_by_hand():
    p = stage_params(d=2, rel=1)
    w = np.array([[1.0, 0.5], [-1.0, 2.0], [0.25, -0.5]])
    p["gcn.w.weight"].data[...] = w
    h_p = np.array([[[1.0, -2.0], [0.5, 3.0]]])
    r = np.array([[[[0.0], [4.0]], [[-1.0], [0.0]]]])  # r[0, j, i]
    omega = np.zeros((1, 2, 2, 1))
    omega[0, 1, 0, 0] = omega[0, 0, 1, 0] = 1.0
    # node 0 hears node 1 along r[1, 0] = -1:  relu(h_p[1]) ++ [-1] = [0.5, 3, -1]
    msg0 = np.array([0.5, 3.0, -1.0]) @ w
    msg1 = np.array([1.0, 0.0, 4.0]) @ w
    expected = np.maximum(h_p[0] + np.stack([msg0, msg1]), 0)
    valid = ~np.eye(2, dtype=bool)[None]
    f = edge_concat(T.Tensor(h_p), T.Tensor(r), valid)
    np.testing.assert_array_equal(graph_conv_update(T.Tensor(h_p), f, T.Tensor(omega), p).data[0], expected)
    np.testing.assert_allclose(graph_conv_fused(T.Tensor(h_p), T.Tensor(r), T.Tensor(omega), p).data[0], expected,
                               rtol=0, atol=1e-15)


def test_identical_neighbours_make_attention_irrelevant():
    p = stage_params(heads=1)
    rng = np.random.default_rng(10)
    n = 4
    h_p = np.repeat(rng.normal(size=(1, 1, 3)), n, axis=1)
    r = np.repeat(np.repeat(rng.normal(size=(1, 1, 1, 2)), n, axis=1), n, axis=2)
    valid = ~np.eye(n, dtype=bool)[None]
    outs = []
    for _ in range(3):
        omega = rng.dirichlet(np.ones(n - 1), size=n)  # per target i, over its neighbours
        full = np.zeros((1, n, n, 1))
        for i in range(n):
            full[0, [j for j in range(n) if j != i], i, 0] = omega[i]
        outs.append(graph_conv_fused(T.Tensor(h_p), T.Tensor(r), T.Tensor(full), p).data)
    for o in outs[1:]:
        np.testing.assert_allclose(o, outs[0], rtol=0, atol=1e-12)


def test_fused_and_literal_graph_conv_agree():
    p = stage_params(d=4, rel=3, heads=2, seed=11)
    rng = np.random.default_rng(12)
    n = 4
    mask = np.array([[True, True, True, False]])
    valid = mask[:, :, None] & mask[:, None, :] & ~np.eye(n, dtype=bool)
    h_p, r = T.Tensor(rng.normal(size=(1, n, 4))), T.Tensor(rng.normal(size=(1, n, n, 3)))
    omega = qr_self_attention(T.Tensor(rng.normal(size=(1, 4))), r, valid, p)
    a = graph_conv_update(h_p, edge_concat(h_p, r, valid), omega, p).data
    b = graph_conv_fused(h_p, r, omega, p).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)


def test_object_attention_uniform_and_single_node():
    p = stage_params()
    p["oatt.score.weight"].data[...] = 0.0
    rng = np.random.default_rng(13)
    w = q_object_attention(T.Tensor(rng.normal(size=(1, 4))), T.Tensor(rng.normal(size=(1, 5, 3))),
                           np.ones((1, 5), dtype=bool), p).data
    np.testing.assert_allclose(w, 0.2, rtol=0, atol=1e-15)
    w1 = q_object_attention(T.Tensor(rng.normal(size=(1, 4))), T.Tensor(rng.normal(size=(1, 1, 3))),
                            np.ones((1, 1), dtype=bool), stage_params()).data
    assert w1.tolist() == [[1.0]]


def test_aggregate_properties():
    rng = np.random.default_rng(14)
    h = rng.normal(size=(1, 4, 3))
    one_hot = np.array([[0.0, 0.0, 1.0, 0.0]])
    np.testing.assert_array_equal(aggregate(T.Tensor(h), T.Tensor(one_hot)).data[0], h[0, 2])
    same = np.repeat(h[:, :1], 4, axis=1)
    w = rng.dirichlet(np.ones(4))[None]
    np.testing.assert_allclose(aggregate(T.Tensor(same), T.Tensor(w)).data[0], h[0, 0], rtol=0, atol=1e-15)
    np.testing.assert_allclose(aggregate(T.Tensor(2.5 * h), T.Tensor(w)).data,
                               2.5 * aggregate(T.Tensor(h), T.Tensor(w)).data, rtol=1e-14, atol=0)


def test_predict_answers_codomain():
    rng = np.random.default_rng(15)
    p = ModelParams()
    p.add("answer.w_a.weight", rng.normal(size=(4, 3)))
    add_linear(p, "answer.mlp1", 3, 6, rng)
    add_linear(p, "answer.mlp2", 6, 5, rng)
    v, q = T.Tensor(rng.normal(size=(2, 3))), T.Tensor(rng.normal(size=(2, 4)))
    s = predict_answers(v, q, p).data
    assert ((s > 0) & (s < 1)).all()
    p["answer.mlp2.weight"].data[...] = 0.0
    assert (predict_answers(v, q, p).data == 0.5).all()


# --- bce -----------------------------------------------------------------------------------
def test_bce_exact_targets_contribute_zero():
    assert bce_loss(np.array([0.0, 1.0]), np.array([0.0, 1.0])).item() == 0.0


def test_bce_half_probability():
    assert abs(bce_loss(np.array([0.5]), np.array([1.0])).item() - math.log(2)) <= 1e-10
    assert abs(T.bce_with_logits(np.array([0.0]), np.array([1.0])).item() - math.log(2)) <= 1e-10


def test_bce_matches_elementwise_reference():
    rng = np.random.default_rng(16)
    for _ in range(10):
        p = rng.uniform(0.01, 0.99, size=(3, 5))
        t = rng.uniform(size=(3, 5))
        assert abs(bce_loss(p, t).item() - bce_reference(p, t)) <= 1e-10
        z = np.log(p / (1 - p))
        assert abs(T.bce_with_logits(z, t).item() - bce_reference(p, t)) <= 1e-10


def test_bce_rejects_targets_outside_unit_interval():
    with pytest.raises(ValueError):
        bce_loss(np.array([0.5]), np.array([1.5]))
    with pytest.raises(ValueError):
        T.bce_with_logits(np.array([0.0]), np.array([-0.1]))


def test_bce_gradients():
    rng = np.random.default_rng(17)
    p = T.Tensor(rng.uniform(0.1, 0.9, size=6), requires_grad=True)
    z = T.Tensor(rng.normal(size=6), requires_grad=True)
    t = rng.uniform(size=6)
    assert finite_diff_check(lambda: bce_loss(p, t), [p], tol=1e-6).passed
    assert finite_diff_check(lambda: T.bce_with_logits(z, t), [z], tol=1e-6).passed


# --- full model -------------------------------------------------------------------------------
def test_config_requires_divisible_heads():
    with pytest.raises(ConfigError):
        tiny_config(d=5, heads=2)
    with pytest.raises(ConfigError):
        tiny_config(graph_conv=False, implicit=True)


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_model_matches_tape_free_reference(variant):
    cfg = tiny_config(**VARIANTS[variant])
    model = scaled_model(cfg, seed=1)
    rng = np.random.default_rng(2)
    graphs = [random_graph(rng, n) for n in (3, 1, 4, 2)]
    tokens = [random_tokens(rng) for _ in graphs]
    out = model.forward(GraphBatch.from_graphs(graphs, tokens))
    params = numpy_params(model)
    for b, (g, toks) in enumerate(zip(graphs, tokens)):
        ref = scenegcn_reference(params, cfg, g.node_features, g.edge_embeddings, g.edge_known, toks)
        n = g.n_nodes
        np.testing.assert_allclose(out.scores.data[b], ref["scores"], rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.object_attention.data[b, :n], ref["object_attention"], rtol=0, atol=1e-12)
        assert not out.object_attention.data[b, n:].any()
        np.testing.assert_allclose(out.h_s.data[b, :n], ref["h_s"], rtol=0, atol=1e-12)
        if cfg.graph_conv:
            np.testing.assert_allclose(out.edge_attention.data[b, :n, :n], ref["edge_attention"], rtol=0, atol=1e-12)


def test_implicit_edges_have_explicit_shapes_and_match_for_equal_pairs():
    cfg = tiny_config(implicit=True)
    model = SceneGCN(cfg, np.random.default_rng(3))
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(4, 5))
    feats[2] = feats[0]
    feats[3] = feats[1]
    g = random_graph(rng, 4)
    g.node_features[:] = feats
    batch = single_batch(g, [3, 4])
    r = model.relation_embeddings(batch).data[0]
    assert r.shape == (4, 4, cfg.rel_dim)
    np.testing.assert_array_equal(r[0, 1], r[2, 3])
    explicit = SceneGCN(tiny_config(), np.random.default_rng(3)).forward(batch)
    implicit = model.forward(batch)
    for name in ("scores", "edge_attention", "object_attention", "h_s"):
        assert getattr(explicit, name).shape == getattr(implicit, name).shape


def test_unknown_edges_use_the_learned_vector():
    model = SceneGCN(tiny_config(), np.random.default_rng(5))
    g = random_graph(np.random.default_rng(6), 3, p_unknown=1.0)
    r = model.relation_embeddings(single_batch(g, [2])).data[0]
    for j, i in g.edges():
        np.testing.assert_array_equal(r[j, i], model.params["unknown_edge"].data)


def test_edge_width_checked():
    model = SceneGCN(tiny_config(), np.random.default_rng(5))
    g = random_graph(np.random.default_rng(6), 3, rel_dim=4)
    with pytest.raises(T.DimensionError):
        model.forward(single_batch(g, [2]))


def test_zero_conv_weights_give_the_baseline_subnetwork():
    full = SceneGCN(tiny_config(), np.random.default_rng(7))
    base = SceneGCN(tiny_config(graph_conv=False), np.random.default_rng(8))
    shared = {k: t.data for k, t in full.params.items() if k in base.params}
    base.params.load_state(shared)
    full.params["gcn.w.weight"].data[...] = 0.0
    rng = np.random.default_rng(9)
    batch = GraphBatch.from_graphs([random_graph(rng, 4), random_graph(rng, 2)], [[2, 3], [4]])
    a, b = full.forward(batch), base.forward(batch)
    np.testing.assert_array_equal(a.h_s.data, np.maximum(a.h_p.data, 0))
    np.testing.assert_allclose(a.scores.data, b.scores.data, rtol=0, atol=1e-15)


def test_dropout_only_in_training():
    model = SceneGCN(tiny_config(dropout=0.5), np.random.default_rng(10))
    batch = single_batch(random_graph(np.random.default_rng(11), 3), [2, 3])
    a = model.forward(batch).scores.data
    b = model.forward(batch, "eval").scores.data
    c = model.forward(batch, "train", np.random.default_rng(0)).scores.data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_model_gradients(variant):
    cfg = tiny_config(**VARIANTS[variant], dropout=0.5)
    model = scaled_model(cfg, seed=12)
    rng = np.random.default_rng(13)
    batch = GraphBatch.from_graphs([random_graph(rng, 3), random_graph(rng, 2)], [[2, 5, 7, 3, 9], [4, 4]])
    targets = rng.uniform(size=(2, cfg.n_answers))

    def f():
        return model.loss(batch, targets, "train", np.random.default_rng(14))[0]

    report = finite_diff_check(f, model.params, tol=1e-4, floor=1e-5, max_coords=24)
    assert report.passed, report
