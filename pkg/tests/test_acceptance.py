"""Acceptance criteria 1-9, each reported as one PASS/FAIL line.

The long-running criteria (5 to 8) train real models; the whole module takes
about 25 minutes on a single CPU core.  Deselect with ``-m "not acceptance"``.
"""

import math
import time

import numpy as np
import pytest

from scenegcn import tensor as T
from scenegcn.graph import features_from_bytes, features_to_bytes
from scenegcn.gradsuite import run_suite
from scenegcn.model import GraphBatch, bce_loss
from scenegcn.optim import adamax_step, clip_gradients
from scenegcn.relation import triplet_loss, triplet_softmax_loss
from scenegcn.synthetic import SceneConfig, SyntheticWorld, WorldConfig, generate_dataset
from scenegcn.train import (ExperimentConfig, PredicateLabeler, attention_trace, make_batch, make_targets,
                            new_state, prepare_data, top_edge_links, train, train_relation_encoder)

from conftest import random_graph, random_tokens, scaled_model, tiny_config
from oracles import bce_reference, scenegcn_reference, triplet_reference, triplet_softmax_reference

pytestmark = pytest.mark.acceptance

ORACLE_VARIANTS = (dict(), dict(heads=2), dict(implicit=True), dict(graph_conv=False),
                   dict(graph_conv=False, q_att=True, gru_layers=2), dict(q_att=True))


# --- 1: gradient suite ----------------------------------------------------------------------
def test_criterion_1_gradient_suite(record):
    start = time.perf_counter()
    failures, count = [], 0
    for scope in ("op", "module", "e2e"):
        for name, report in run_suite(scope):
            count += 1
            if not report.passed:
                failures.append(f"{scope}/{name} ({report.worst[0]} rel err {report.worst[1]:.2e})")
    elapsed = time.perf_counter() - start
    passed = not failures and elapsed < 120
    record(1, passed, f"{count - len(failures)}/{count} gradient checks pass, {elapsed:.1f}s"
           + (f"; failing: {', '.join(failures)}" if failures else ""))
    assert passed


# --- 2: oracle equivalence --------------------------------------------------------------------
def test_criterion_2_oracle_equivalence(record):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(50):
        cfg = tiny_config(**ORACLE_VARIANTS[k % len(ORACLE_VARIANTS)])
        model = scaled_model(cfg, seed=k)
        graphs = [random_graph(rng, int(rng.integers(1, 5))) for _ in range(int(rng.integers(1, 4)))]
        tokens = [random_tokens(rng) for _ in graphs]
        out = model.forward(GraphBatch.from_graphs(graphs, tokens))
        params = {name: t.data for name, t in model.params.items()}
        for b, (g, toks) in enumerate(zip(graphs, tokens)):
            ref = scenegcn_reference(params, cfg, g.node_features, g.edge_embeddings, g.edge_known, toks)
            n = g.n_nodes
            worst = max(worst, np.abs(out.scores.data[b] - ref["scores"]).max(),
                        np.abs(out.object_attention.data[b, :n] - ref["object_attention"]).max(),
                        np.abs(out.h_s.data[b, :n] - ref["h_s"]).max())
            if cfg.graph_conv:
                worst = max(worst, np.abs(out.edge_attention.data[b, :n, :n] - ref["edge_attention"]).max())

        # both relation-encoder losses and the answer loss
        m, n_neg, width = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(2, 7))
        v, l = rng.normal(size=(m, width)), rng.normal(size=(m, width))
        v_neg, l_neg = rng.normal(size=(m, n_neg, width)), rng.normal(size=(m, n_neg, width))
        worst = max(worst, abs(triplet_loss(T.Tensor(v), T.Tensor(l), T.Tensor(v_neg), 0.2).item()
                               - triplet_reference(v, l, v_neg, 0.2)))
        scale = float(rng.uniform(1, 5))
        worst = max(worst, abs(triplet_softmax_loss(T.Tensor(v), T.Tensor(l), T.Tensor(l_neg), scale).item()
                               - triplet_softmax_reference(v, l, l_neg, scale)))
        p, t = rng.uniform(0.02, 0.98, size=(2, 5)), rng.uniform(size=(2, 5))
        worst = max(worst, abs(bce_loss(p, t).item() - bce_reference(p, t)))
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-12 and elapsed < 60
    record(2, passed, f"max abs deviation {worst:.2e} over 50 instances, {elapsed:.1f}s")
    assert passed


# --- 3: attention invariants --------------------------------------------------------------------
def test_criterion_3_attention_invariants(record):
    rng = np.random.default_rng(3)
    configs = [tiny_config(**kw) for kw in (dict(), dict(heads=2), dict(implicit=True))]
    models = [scaled_model(c, seed=s) for s, c in enumerate(configs)]
    simplex_err = perm_err = 0.0
    for k in range(1000):
        model = models[k % len(models)]
        n = int(rng.integers(2, 7))
        g = random_graph(rng, n)
        toks = random_tokens(rng)
        perm = rng.permutation(n)
        a = model.forward(GraphBatch.from_graphs([g], [toks]))
        b = model.forward(GraphBatch.from_graphs([g.permute(perm)], [toks]))
        omega = a.edge_attention.data[0]  # [j, i, k]
        incoming = omega.sum(axis=0)
        simplex_err = max(simplex_err, np.abs(incoming - 1).max(), np.abs(a.object_attention.data[0].sum() - 1),
                          -min(omega.min(), a.object_attention.data.min()))
        perm_err = max(perm_err,
                       np.abs(b.object_attention.data[0] - a.object_attention.data[0][perm]).max(),
                       np.abs(b.edge_attention.data[0] - omega[np.ix_(perm, perm)]).max(),
                       np.abs(b.scores.data - a.scores.data).max())
    passed = simplex_err <= 1e-9 and perm_err <= 1e-9
    record(3, passed, f"simplex deviation {simplex_err:.1e}, permutation deviation {perm_err:.1e} "
                      "over 1000 forward passes")
    assert passed


# --- 4: closed-form loss values -------------------------------------------------------------------
def test_criterion_4_closed_form_losses(record):
    rng = np.random.default_rng(4)
    v, l = T.Tensor(rng.normal(size=(3, 8))), T.Tensor(rng.normal(size=(3, 8)))
    n_neg = 5
    same_v = T.Tensor(np.repeat(v.data[:, None], n_neg, axis=1))
    same_l = T.Tensor(np.repeat(l.data[:, None], n_neg, axis=1))
    errs = {
        "triplet": abs(triplet_loss(v, l, same_v, 0.2).item() - 0.2),
        "triplet_softmax": abs(triplet_softmax_loss(v, l, same_l).item() - math.log(1 + n_neg)),
        "bce": abs(bce_loss(np.array([0.5]), np.array([1.0])).item() - math.log(2)),
    }
    passed = max(errs.values()) <= 1e-10
    record(4, passed, ", ".join(f"{k} error {e:.1e}" for k, e in errs.items()))
    assert passed


# --- 5: overfit smoke test ---------------------------------------------------------------------------
def test_criterion_5_overfit(record):
    start = time.perf_counter()
    dataset = generate_dataset(4, 0)
    cfg = ExperimentConfig(variant="scenegcn", d=512, d_q=512, mlp_hidden=1024, dropout=0.5, batch_size=16,
                           lr=1e-3, clip_norm=0.25)
    questions = dataset.questions[:16]
    data = prepare_data(dataset, cfg, answers=sorted({q.answer for q in questions}))
    state = new_state(cfg, data, 0)
    batch, targets = make_batch(questions, data), make_targets(questions, data)
    loss = math.inf
    steps = 0
    while steps < 500 and loss >= 0.01:
        state.model.params.zero_grad()
        out, _ = state.model.loss(batch, targets, "train", state.rng)
        T.backward(out)
        clip_gradients(state.model.params, cfg.clip_norm)
        adamax_step(state.model.params, state.opt)
        loss = float(out.data)
        steps += 1
    elapsed = time.perf_counter() - start
    passed = loss < 0.01 and elapsed < 180
    record(5, passed, f"summed BCE {loss:.4f} after {steps} Adamax steps on {len(questions)} examples, "
                      f"{elapsed:.1f}s")
    assert passed


# --- 7 (and the encoder used by 6 and 8) --------------------------------------------------------------
@pytest.fixture(scope="module")
def relation_stage():
    start = time.perf_counter()
    world = SyntheticWorld(WorldConfig())
    cfg = ExperimentConfig(rel_per_predicate=500, rel_epochs=5)
    samples = world.relation_samples(cfg.rel_per_predicate, np.random.default_rng([0, 2]))
    held_out = world.relation_samples(50, np.random.default_rng([0, 3]))
    lexicon = [world.predicate_tokens(p) for p in range(len(world.predicates))]
    encoder, history = train_relation_encoder(samples, world.vocabulary(), cfg, 0, lexicon, held_out)
    return encoder, history, time.perf_counter() - start, len(samples), len(world.predicates)


def test_criterion_7_relation_retrieval(relation_stage, record):
    _, history, elapsed, n_samples, n_pred = relation_stage
    recall = history[-1]["recall_at_1"]
    passed = recall >= 0.9 and elapsed < 600 and len(history) == 5
    record(7, passed, f"recall@1 {recall:.3f} on held-out samples after {len(history)} epochs "
                      f"({n_pred} predicates, {n_samples} samples), {elapsed:.1f}s")
    assert passed


# --- 6: ablation direction -------------------------------------------------------------------------------
ABLATION_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def ablation(relation_stage):
    encoder = relation_stage[0]
    start = time.perf_counter()
    dataset = generate_dataset(5000, 0, scene_cfg=SceneConfig(relation_open=2), kinds=("relation_open",))
    base = dict(d=128, d_q=128, mlp_hidden=256, batch_size=64, lr=3e-3, epochs=20, gru_layers=1, q_att=False)
    data = prepare_data(dataset, ExperimentConfig(**base), encoder)
    accuracy, models = {}, {}
    for variant in ("scenegcn", "implicit", "baseline"):
        cfg = ExperimentConfig(variant=variant, **base)
        for seed in ABLATION_SEEDS:
            state = train(cfg, data, seed)
            accuracy[variant, seed] = state.history[-1]["val_accuracy"]
            models[variant, seed] = state.model
    return accuracy, models, data, encoder, time.perf_counter() - start


def test_criterion_6_ablation_direction(ablation, record):
    accuracy, _, _, _, elapsed = ablation
    mean = {v: float(np.mean([accuracy[v, s] for s in ABLATION_SEEDS])) for v in ("scenegcn", "implicit", "baseline")}
    gap_implicit = 100 * (mean["scenegcn"] - mean["implicit"])
    gap_baseline = 100 * (mean["scenegcn"] - mean["baseline"])
    passed = gap_implicit >= 10 and gap_baseline >= 15 and mean["scenegcn"] >= 0.9 and elapsed < 1800
    record(6, passed, f"relation accuracy scenegcn {mean['scenegcn']:.3f}, implicit {mean['implicit']:.3f}, "
                      f"baseline {mean['baseline']:.3f} (gaps {gap_implicit:.1f} / {gap_baseline:.1f} points, "
                      f"3 seeds), {elapsed / 60:.1f} min")
    assert passed


# --- 8: interpretability proxy -----------------------------------------------------------------------------
def test_criterion_8_top_edge_links_named_objects(ablation, record):
    _, models, data, encoder, _ = ablation
    model = models["scenegcn", 0]
    labeler = PredicateLabeler(data.lexicon, encoder)
    questions = [q for q in data.val if q.family == "relation" and q.anchor is not None]
    hits = sum(top_edge_links(attention_trace(model, data.graphs[q.scene_id], q, data, labeler), q.anchor, q.target)
               for q in questions)
    rate = hits / len(questions)
    passed = rate >= 0.8
    record(8, passed, f"top edge joins the two named objects on {rate:.3f} of {len(questions)} held-out questions")
    assert passed


# --- 9: determinism and persistence ---------------------------------------------------------------------------
def test_criterion_9_determinism_and_persistence(tmp_path, record):
    checks = {}
    dataset = generate_dataset(20, 9)
    cfg = ExperimentConfig(d=16, d_q=16, mlp_hidden=32, batch_size=16, epochs=3, dropout=0.2)
    data = prepare_data(dataset, cfg)
    train(cfg, data, 5, tmp_path / "a")
    train(cfg, data, 5, tmp_path / "b")
    train(cfg, data, 5, tmp_path / "c", resume=tmp_path / "a" / "epoch_001.ckpt")
    final = (tmp_path / "a" / "epoch_003.ckpt").read_bytes()
    checks["repeated run"] = final == (tmp_path / "b" / "epoch_003.ckpt").read_bytes()
    checks["resume"] = final == (tmp_path / "c" / "epoch_003.ckpt").read_bytes()

    rng = np.random.default_rng(9)
    feats = rng.normal(size=(36, 2048))
    corner = rng.random((36, 2)) * 0.7
    boxes = np.hstack([corner, corner + 0.3])
    buf = features_to_bytes(feats, boxes)
    checks["feature container"] = features_to_bytes(*features_from_bytes(buf)) == buf
    tensor_ok = True
    for shape in ((), (0,), (3,), (2, 3, 4), (1, 1, 7, 7)):
        tbuf = T.tensor_to_bytes(rng.normal(size=shape))
        arr, end = T.tensor_from_bytes(tbuf)
        tensor_ok &= end == len(tbuf) and T.tensor_to_bytes(arr) == tbuf
    checks["tensor file"] = tensor_ok
    passed = all(checks.values())
    record(9, passed, ", ".join(f"{k} {'identical' if ok else 'DIFFERS'}" for k, ok in checks.items()))
    assert passed
