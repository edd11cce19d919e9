from __future__ import annotations

import numpy as np
import pytest

from scenegcn.graph import SceneGraph
from scenegcn.model import GraphBatch, ModelConfig, SceneGCN

ACCEPTANCE_RESULTS: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)


@pytest.fixture
def record():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])


# --- small model builders shared by several test modules -------------------------------
def tiny_config(**kw) -> ModelConfig:
    base = dict(d_obj=5, vocab_size=12, n_answers=7, d=4, d_q=6, rel_dim=6, mlp_hidden=8, word_dim=5, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def random_graph(rng, n: int, d_obj: int = 5, rel_dim: int = 6, p_unknown: float = 0.3) -> SceneGraph:
    known = (rng.random((n, n)) >= p_unknown) & ~np.eye(n, dtype=bool)
    edges = rng.normal(size=(n, n, rel_dim)) * known[..., None]
    return SceneGraph(rng.normal(size=(n, d_obj)), edges, known)


def random_tokens(rng, vocab_size: int = 12, lo: int = 1, hi: int = 6) -> list[int]:
    return [int(t) for t in rng.integers(2, vocab_size, size=int(rng.integers(lo, hi + 1)))]


def scaled_model(cfg: ModelConfig, seed: int = 0, scale: float = 3.0) -> SceneGCN:
    """Tiny model with weights scaled up so attention logits are far from uniform."""
    model = SceneGCN(cfg, np.random.default_rng(seed))
    for name, t in model.params.items():
        if not name.endswith(".embed"):
            t.data *= scale
    return model


def single_batch(graph: SceneGraph, tokens) -> GraphBatch:
    return GraphBatch.from_graphs([graph], [tokens])
