"""Finite-difference gradient suites at three scopes: single ops, modules, end to end.

Every check builds a small random problem, reduces it to a scalar by
contracting with a fixed random weight, and compares tape gradients with
central differences.  Inputs to kinked functions (relu) are kept away from
the kink so the differences are smooth.
"""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .gradcheck import GradCheckReport, finite_diff_check
from .model import GraphBatch, ModelConfig, SceneGCN, aggregate, bce_loss, graph_conv_update, edge_concat
from .model import project_nodes, q_object_attention, qr_self_attention
from .params import ModelParams
from .relation import (RelationEncoder, RelationEncoderConfig, RelationLossConfig, RelationSample,
                       total_relation_loss, triplet_loss, triplet_softmax_loss)
from .text import QuestionConfig, QuestionEncoder, Vocabulary, add_gru, gru_encode_batch

SCOPES = ("op", "module", "e2e")
Check = Callable[[], GradCheckReport]


def _leaf(rng, *shape, away: float = 0.0) -> T.Tensor:
    """Random leaf; with ``away`` > 0 entries satisfy ``|x| >= away``."""
    x = rng.normal(size=shape)
    if away:
        x = np.sign(x) * (np.abs(x) + away)
    return T.Tensor(x, requires_grad=True)


def _contract(out: T.Tensor, rng) -> Callable[[T.Tensor], T.Tensor]:
    w = rng.normal(size=out.shape)
    return lambda y: T.tsum(y * w)


def _op_check(fn, leaves, tol, rng) -> GradCheckReport:
    with T.no_grad():
        probe = fn(*leaves)
    reduce = _contract(probe, rng)
    return finite_diff_check(lambda: reduce(fn(*leaves)), leaves, tol=tol)


def op_checks(tol: float = 1e-5, seed: int = 0) -> Iterator[tuple[str, Check]]:
    rng = np.random.default_rng(seed)
    L = lambda *s, **k: _leaf(rng, *s, **k)  # noqa: E731
    mask = np.array([[True, True, False, True], [False, False, False, False], [True, False, True, True]])
    targets = rng.uniform(size=(3, 4))
    cases = {
        "add": (T.add, [L(3, 4), L(4)]),
        "sub": (T.sub, [L(3, 1), L(3, 4)]),
        "mul": (T.mul, [L(2, 3, 4), L(3, 1)]),
        "div": (T.div, [L(3, 4), L(3, 4, away=0.5)]),
        "neg": (T.neg, [L(5)]),
        "exp": (T.exp, [L(3, 4)]),
        "log": (lambda x: T.log(T.exp(x) + 0.5), [L(3, 4)]),
        "square": (T.square, [L(3, 4)]),
        "sum": (lambda x: T.tsum(x, axis=1, keepdims=True), [L(3, 4, 2)]),
        "mean": (lambda x: T.mean(x, axis=(0, 2)), [L(3, 4, 2)]),
        "reshape": (lambda x: T.reshape(x, (4, 6)), [L(2, 3, 4)]),
        "transpose": (lambda x: T.transpose(x, (2, 0, 1)), [L(2, 3, 4)]),
        "expand_dims": (lambda x: T.expand_dims(x, 1), [L(3, 4)]),
        "broadcast_to": (lambda x: T.broadcast_to(x, (2, 3, 4)), [L(3, 1)]),
        "getitem_basic": (lambda x: x[1:, ::2], [L(4, 5)]),
        "getitem_advanced": (lambda x: x[np.array([0, 2, 0])], [L(3, 4)]),
        "take_rows": (lambda x: T.take_rows(x, np.array([[0, 2], [2, 2]])), [L(3, 4)]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [L(2, 3), L(2, 2)]),
        "stack": (lambda a, b: T.stack([a, b], axis=1), [L(2, 3), L(2, 3)]),
        "matmul_2d": (T.matmul, [L(3, 4), L(4, 5)]),
        "matmul_nd_2d": (T.matmul, [L(2, 3, 4), L(4, 5)]),
        "matmul_batched": (T.matmul, [L(2, 3, 4), L(2, 4, 2)]),
        "matmul_vec": (T.matmul, [L(4), L(4, 3)]),
        "relu": (T.relu, [L(3, 4, away=0.1)]),
        "sigmoid": (T.sigmoid, [L(3, 4)]),
        "tanh": (T.tanh, [L(3, 4)]),
        "softmax": (lambda x: T.softmax(x, axis=1), [L(3, 4)]),
        "softmax_masked": (lambda x: T.softmax(x, axis=1, mask=mask), [L(3, 4)]),
        "logsumexp": (lambda x: T.logsumexp(x, axis=0), [L(3, 4)]),
        "cosine_similarity": (T.cosine_similarity, [L(3, 5), L(3, 5)]),
        "bce_with_logits": (lambda z: T.bce_with_logits(z, targets), [L(3, 4)]),
        "conv2d": (T.conv2d, [L(2, 3, 5, 5), L(4, 3, 3, 3)]),
        "conv2d_stride_pad": (lambda x, k: T.conv2d(x, k, stride=2, padding=1), [L(1, 2, 5, 5), L(3, 2, 3, 3)]),
        "dropout": (lambda x: T.dropout(x, 0.5, "train", np.random.default_rng(3)), [L(4, 5)]),
    }
    for name, (fn, leaves) in cases.items():
        yield name, (lambda fn=fn, leaves=leaves: _op_check(fn, leaves, tol, rng))


# --- modules -----------------------------------------------------------------------------
def _tiny_encoder(rng, vocab: Vocabulary) -> RelationEncoder:
    cfg = RelationEncoderConfig(len(vocab), in_channels=3, conv_channels=4, embed_dim=6, word_dim=5, gru_hidden=4)
    return RelationEncoder(cfg, vocab, rng)


def _tiny_samples(rng, n: int = 4) -> list[RelationSample]:
    subjects = [["dog"], ["cat"], ["dog"], ["cup"]]
    objects = [["cup"], ["dog"], ["tree"], ["cat"]]
    preds = [["left", "of"], ["on"], ["on"], ["near"]]
    return [RelationSample(rng.normal(size=(3, 7, 7)), rng.normal(size=(3, 7, 7)), rng.normal(size=(3, 7, 7)),
                           subjects[k % 4], objects[k % 4], preds[k % 4]) for k in range(n)]


def _tiny_vocab() -> Vocabulary:
    return Vocabulary(["dog", "cat", "cup", "tree", "left", "of", "on", "near", "what", "is", "the", "?"])


def _tiny_model(rng, heads: int = 1, implicit: bool = False, graph_conv: bool = True, q_att: bool = False,
                n_answers: int = 7) -> SceneGCN:
    cfg = ModelConfig(d_obj=5, vocab_size=12, n_answers=n_answers, d=4, d_q=6, heads=heads, rel_dim=6,
                      mlp_hidden=8, gru_layers=2 if q_att else 1, q_att=q_att, graph_conv=graph_conv,
                      implicit=implicit, dropout=0.5, word_dim=5)
    return SceneGCN(cfg, rng)


def _tiny_batch(rng, n_nodes=(3,), n_tokens: int = 5) -> GraphBatch:
    from .graph import SceneGraph

    graphs, questions = [], []
    for n in n_nodes:
        known = ~np.eye(n, dtype=bool)
        known[0, n - 1] = False  # one unknown-relationship edge
        edges = rng.normal(size=(n, n, 6)) * known[..., None]
        graphs.append(SceneGraph(rng.normal(size=(n, 5)), edges, known))
        questions.append(list(rng.integers(2, 12, size=n_tokens)))
    return GraphBatch.from_graphs(graphs, questions)


def module_checks(tol: float = 1e-5, seed: int = 0) -> Iterator[tuple[str, Check]]:
    rng = np.random.default_rng(seed)

    def gru(layers):
        p = ModelParams()
        add_gru(p, "g", 3, 4, rng, layers=layers)
        x = _leaf(rng, 2, 5, 3)
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
        w = rng.normal(size=(2, 5, 4))
        leaves = dict(p.trainable(), x=x)
        return lambda: finite_diff_check(
            lambda: T.tsum(gru_encode_batch(x, mask, p, "g")[0] * w), leaves, tol=tol)

    yield "gru_1_layer", gru(1)
    yield "gru_2_layers", gru(2)

    def question(att):
        enc = QuestionEncoder(QuestionConfig(12, hidden=4, layers=2 if att else 1, attention=att, att_hidden=3,
                                             embed_dim=5), rng)
        ids = np.array([[2, 5, 7, 1], [3, 4, 9, 11]])
        mask = ids != 1
        w = rng.normal(size=(2, 4))
        return lambda: finite_diff_check(lambda: T.tsum(enc.encode_batch(ids, mask) * w), enc.params, tol=tol)

    yield "question_encoder", question(False)
    yield "question_encoder_attention", question(True)

    vocab = _tiny_vocab()
    enc = _tiny_encoder(rng, vocab)
    samples = _tiny_samples(rng)
    xs = [np.stack([getattr(s, a) for s in samples]) for a in ("x_s", "x_o", "x_r")]
    w_vis = rng.normal(size=(3, 4, 6))

    def visual():
        v = enc.visual_forward(*xs)
        return T.tsum(T.stack(v) * w_vis)

    yield "relation_visual", lambda: finite_diff_check(visual, {k: t for k, t in enc.params.items()
                                                               if not k.startswith("lang.")}, tol=tol)
    w_lang = rng.normal(size=(3, 6))
    yield "relation_language", lambda: finite_diff_check(
        lambda: T.tsum(enc.language_batch([["left", "of"], ["on"], ["left", "of"]]) * w_lang),
        {k: t for k, t in enc.params.items() if k.startswith("lang.")}, tol=tol)

    v, l, v_neg = _leaf(rng, 4, 6), _leaf(rng, 4, 6), _leaf(rng, 4, 3, 6)
    yield "triplet_loss", lambda: finite_diff_check(lambda: triplet_loss(v, l, v_neg, 5.0), [v, l, v_neg], tol=tol)
    l_neg = _leaf(rng, 4, 3, 6)
    yield "triplet_softmax_loss", lambda: finite_diff_check(
        lambda: triplet_softmax_loss(v, l, l_neg, 2.0), [v, l, l_neg], tol=tol)

    model = _tiny_model(rng, heads=2)
    p = model.params
    batch = _tiny_batch(rng, (3, 2))
    n = batch.node_mask.shape[1]
    valid = batch.node_mask[:, :, None] & batch.node_mask[:, None, :] & ~np.eye(n, dtype=bool)
    h = T.Tensor(batch.node_features)
    q = _leaf(rng, 2, 6)
    r = _leaf(rng, 2, n, n, 6)
    only = lambda *names: {k: p[k] for k in names}  # noqa: E731

    w1 = rng.normal(size=(2, n, 4))
    yield "project_nodes", lambda: finite_diff_check(
        lambda: T.tsum(project_nodes(h, p) * w1), only("proj.weight", "proj.bias"), tol=tol)
    w2 = rng.normal(size=(2, n, n, 2))
    yield "qr_self_attention", lambda: finite_diff_check(
        lambda: T.tsum(qr_self_attention(q, r, valid, p) * w2),
        dict(only("satt.w_q.weight", "satt.w_r.weight", "satt.score.weight", "satt.score.bias"), q=q, r=r), tol=tol)
    h_p = _leaf(rng, 2, n, 4, away=0.2)
    omega = T.Tensor(rng.dirichlet(np.ones(n), size=(2, n, 2)).transpose(0, 3, 1, 2))  # B x j x i x K
    yield "graph_conv_update", lambda: finite_diff_check(
        lambda: T.tsum(graph_conv_update(h_p, edge_concat(h_p, r, valid), omega, p) * w1),
        dict(only("gcn.w.weight"), h_p=h_p, r=r), tol=tol)
    h_s = _leaf(rng, 2, n, 4)
    w3 = rng.normal(size=(2, n))
    yield "q_object_attention", lambda: finite_diff_check(
        lambda: T.tsum(q_object_attention(q, h_s, batch.node_mask, p) * w3),
        dict(only("oatt.w_q.weight", "oatt.w_h.weight", "oatt.score.weight"), q=q, h_s=h_s), tol=tol)
    om = _leaf(rng, 2, n)
    w4 = rng.normal(size=(2, 4))
    yield "aggregate", lambda: finite_diff_check(lambda: T.tsum(aggregate(h_s, om) * w4), [h_s, om], tol=tol)
    probs = T.Tensor(rng.uniform(0.05, 0.95, size=(3, 7)), requires_grad=True)
    targets = rng.uniform(size=(3, 7))
    yield "bce_loss", lambda: finite_diff_check(lambda: bce_loss(probs, targets), [probs], tol=tol)


# --- end to end ------------------------------------------------------------------------------
def _scale(params, factor: float) -> None:
    # fan-in init on tiny layers makes deep gradients ~1e-8, below round-off
    # of the differences; larger weights give every tensor a measurable signal
    for _, t in params.items():
        t.data *= factor


def e2e_checks(tol: float = 1e-4, seed: int = 0) -> Iterator[tuple[str, Check]]:
    """Relation losses through the encoder, and question -> answer loss through the whole model."""
    rng = np.random.default_rng(seed)
    vocab = _tiny_vocab()
    enc = _tiny_encoder(rng, vocab)
    _scale(enc.params, 3.0)
    samples = _tiny_samples(rng)
    loss_cfg = RelationLossConfig(margin=0.2, n_pos=4, n_neg=2, sim_scale=3.0)
    # differences of an O(1) loss resolve gradients to ~1e-10 absolute, so
    # gradients below 1e-5 are compared on an absolute rather than relative scale
    floor = 1e-5
    yield "relation_pipeline", lambda: finite_diff_check(
        lambda: total_relation_loss(enc, samples, loss_cfg, np.random.default_rng(7)).total, enc.params,
        tol=tol, floor=floor)

    for name, kw in (("scenegcn", {}), ("scenegcn_2att", {"heads": 2}), ("implicit", {"implicit": True}),
                     ("q_att", {"q_att": True}), ("baseline", {"graph_conv": False})):
        model = _tiny_model(rng, **kw)
        _scale(model.params, 3.0)
        batch = _tiny_batch(rng, (3,), n_tokens=5)
        targets = rng.uniform(size=(1, 7)).round(1)

        def f(model=model, batch=batch, targets=targets):
            out = model.forward(batch, "train", np.random.default_rng(11))
            return bce_loss(out.scores, targets)

        yield f"model_{name}", lambda f=f, model=model: finite_diff_check(f, model.params, tol=tol, floor=floor)


def run_suite(scope: str, tol: float | None = None, seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    if scope == "op":
        checks = op_checks(tol or 1e-5, seed)
    elif scope == "module":
        checks = module_checks(tol or 1e-5, seed)
    elif scope == "e2e":
        checks = e2e_checks(tol or 1e-4, seed)
    else:
        raise ValueError(f"scope must be one of {SCOPES}")
    return [(name, check()) for name, check in checks]
