"""SceneGCN: question-guided graph convolution over scene graphs.

All stages work on padded batches:

* node features ``B x N x d_obj`` with a ``B x N`` node mask,
* edge embeddings ``B x N x N x R`` where ``[b, j, i]`` is the edge j -> i,
* question token ids ``B x T`` with a ``B x T`` mask.

Pipeline: project nodes, concatenate relu(neighbour) with the incoming edge,
weight messages with question-relation attention (softmax over neighbours
j of each target i, one distribution per head), residual update, question
guided attention over nodes, weighted aggregation, and a two-layer MLP on
the aggregated vector fused with the question.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .graph import SceneGraph
from .params import ModelParams, add_linear, linear, uniform_fan
from .text import EMBED_DIM, QuestionConfig, QuestionEncoder, pad_batch


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_obj: int
    vocab_size: int
    n_answers: int
    d: int = 512
    d_q: int = 512
    heads: int = 1
    rel_dim: int = 512
    fusion_dim: int | None = None
    mlp_hidden: int = 1024
    gru_layers: int = 1
    q_att: bool = False
    graph_conv: bool = True
    implicit: bool = False
    dropout: float = 0.5
    word_dim: int = EMBED_DIM

    def __post_init__(self):
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"width d={self.d} must be divisible by the head count {self.heads}")
        if self.implicit and not self.graph_conv:
            raise ConfigError("the implicit variant needs graph convolution")

    @property
    def d_f(self) -> int:
        return self.fusion_dim or self.d


@dataclass
class GraphBatch:
    node_features: np.ndarray
    node_mask: np.ndarray
    edges: np.ndarray
    edge_known: np.ndarray
    q_ids: np.ndarray
    q_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.node_features.shape[0]

    @classmethod
    def from_graphs(cls, graphs: Sequence[SceneGraph], questions: Sequence[Sequence[int]],
                    n_pad: int | None = None, t_pad: int | None = None) -> "GraphBatch":
        B = len(graphs)
        n = n_pad or max(g.n_nodes for g in graphs)
        d = graphs[0].node_features.shape[1]
        R = graphs[0].rel_dim
        feats = np.zeros((B, n, d))
        mask = np.zeros((B, n), dtype=bool)
        edges = np.zeros((B, n, n, R))
        known = np.zeros((B, n, n), dtype=bool)
        for b, g in enumerate(graphs):
            k = g.n_nodes
            feats[b, :k] = g.node_features
            mask[b, :k] = True
            edges[b, :k, :k] = g.edge_embeddings
            known[b, :k, :k] = g.edge_known
        ids, qmask = pad_batch(questions, t_pad)
        return cls(feats, mask, edges, known, ids, qmask)


@dataclass
class ForwardOutput:
    logits: T.Tensor
    scores: T.Tensor
    q: T.Tensor
    edge_attention: T.Tensor | None  # B x N x N x K, [b, j, i, k]
    object_attention: T.Tensor  # B x N
    h_p: T.Tensor
    h_s: T.Tensor
    v_hat: T.Tensor


# --- edges -----------------------------------------------------------------------------
@dataclass
class EdgeEmbeddings:
    """Edge embeddings ``r[b, j, i]`` kept in factored form.

    Either observed constants with a learned vector on missing pairs
    (``r = observed + missing * unknown``) or the implicit form
    ``r = src[j] + dst[i] + bias``.  Every use of ``r`` is a linear map, so
    :meth:`project` applies the map to the factors and never builds the
    ``B x N x N x R`` gradient.
    """

    observed: np.ndarray | None = None
    missing: np.ndarray | None = None
    unknown: T.Tensor | None = None
    src: T.Tensor | None = None
    dst: T.Tensor | None = None
    bias: T.Tensor | None = None

    @property
    def implicit(self) -> bool:
        return self.src is not None

    def project(self, w) -> T.Tensor:
        """``r @ w`` for every edge."""
        if self.implicit:
            out = T.expand_dims(T.matmul(self.src, w), 2) + T.expand_dims(T.matmul(self.dst, w), 1)
            return out + T.matmul(self.bias, w)
        out = T.matmul(T.Tensor(self.observed), w)
        if self.unknown is not None and self.missing.any():
            out = out + self.missing[..., None].astype(float) * T.matmul(self.unknown, w)
        return out

    def materialize(self) -> T.Tensor:
        if self.implicit:
            return T.expand_dims(self.src, 2) + T.expand_dims(self.dst, 1) + self.bias
        r = T.Tensor(self.observed)
        if self.unknown is not None and self.missing.any():
            r = r + self.missing[..., None].astype(float) * self.unknown
        return r


def _project(r, w) -> T.Tensor:
    return r.project(w) if isinstance(r, EdgeEmbeddings) else T.matmul(r, w)


# --- stages ----------------------------------------------------------------------------
def project_nodes(h: T.Tensor, params: ModelParams) -> T.Tensor:
    w = params["proj.weight"]
    if h.shape[-1] != w.shape[0]:
        raise T.DimensionError(f"node width {h.shape[-1]} does not match projection input {w.shape[0]}")
    return linear(h, params, "proj")


def edge_concat(h_p: T.Tensor, r: T.Tensor, valid: np.ndarray) -> T.Tensor:
    """``F[b, j, i] = relu(h_p[b, j]) ++ r[b, j, i]``; entries with ``valid`` false are zeroed."""
    B, N, d = h_p.shape
    nodes = T.broadcast_to(T.expand_dims(T.relu(h_p), 2), (B, N, N, d))
    f = T.concat([nodes, r], axis=-1)
    return f * valid[..., None]


def qr_self_attention(q: T.Tensor, r: T.Tensor, valid: np.ndarray, params: ModelParams) -> T.Tensor:
    """Per-head weights ``omega[b, j, i, k]`` normalised over neighbours j of each i."""
    qp = T.matmul(q, params["satt.w_q.weight"])  # B x d_f
    rp = _project(r, params["satt.w_r.weight"])  # B x N x N x d_f
    c = rp * T.reshape(qp, (qp.shape[0], 1, 1, qp.shape[1]))
    logits = linear(c, params, "satt.score")  # B x N x N x K
    return T.softmax(logits, axis=1, mask=valid[..., None])


def graph_conv_update(h_p: T.Tensor, f: T.Tensor, omega: T.Tensor, params: ModelParams) -> T.Tensor:
    """``h_s[i] = relu(h_p[i] + concat_k sum_j omega[j, i, k] * (W_k f[j, i]))``."""
    w = params["gcn.w.weight"]  # (d + R) x d, head k owns columns k*d/K:(k+1)*d/K
    K = omega.shape[-1]
    d = w.shape[1]
    msg = T.matmul(f, w)  # B x N x N x d
    spread = np.kron(np.eye(K), np.ones((1, d // K)))  # K x d head expansion
    weights = T.matmul(omega, spread)
    return T.relu(h_p + T.tsum(weights * msg, axis=1))


def graph_conv_fused(h_p: T.Tensor, r: T.Tensor, omega: T.Tensor, params: ModelParams) -> T.Tensor:
    """Same result as ``graph_conv_update(h_p, edge_concat(h_p, r, valid), omega)``.

    Splits ``W (a ++ b) = W_top a + W_bottom b`` so the node half is computed
    once per node instead of once per edge.  Entries outside ``valid`` have
    zero attention weight, so they need no explicit zeroing here.
    """
    w = params["gcn.w.weight"]
    d = h_p.shape[-1]
    K = omega.shape[-1]
    node_msg = T.matmul(T.relu(h_p), w[:d])  # B x N x d, indexed by sender j
    edge_msg = _project(r, w[d:])  # B x N x N x d
    spread = np.kron(np.eye(K), np.ones((1, d // K)))
    weights = T.matmul(omega, spread)  # B x N(j) x N(i) x d
    from_nodes = T.tsum(weights * T.expand_dims(node_msg, 2), axis=1)
    return T.relu(h_p + from_nodes + T.tsum(weights * edge_msg, axis=1))


def q_object_attention(q: T.Tensor, h_s: T.Tensor, node_mask: np.ndarray, params: ModelParams) -> T.Tensor:
    qp = T.matmul(q, params["oatt.w_q.weight"])
    hp = T.matmul(h_s, params["oatt.w_h.weight"])
    c = hp * T.expand_dims(qp, 1)
    logits = linear(c, params, "oatt.score")
    logits = T.reshape(logits, logits.shape[:-1])
    return T.softmax(logits, axis=1, mask=node_mask)


def aggregate(h_s: T.Tensor, omega: T.Tensor) -> T.Tensor:
    return T.tsum(T.expand_dims(omega, -1) * h_s, axis=1)


def answer_logits(v_hat: T.Tensor, q: T.Tensor, params: ModelParams, dropout: float = 0.0,
                  mode: str = "eval", rng=None) -> T.Tensor:
    fused = v_hat * T.matmul(q, params["answer.w_a.weight"])
    hidden = T.relu(linear(fused, params, "answer.mlp1"))
    hidden = T.dropout(hidden, dropout, mode, rng)
    return linear(hidden, params, "answer.mlp2")


def predict_answers(v_hat: T.Tensor, q: T.Tensor, params: ModelParams, dropout: float = 0.0,
                    mode: str = "eval", rng=None) -> T.Tensor:
    """Answer scores in (0, 1): logistic of the MLP output."""
    return T.sigmoid(answer_logits(v_hat, q, params, dropout, mode, rng))


def bce_loss(scores, targets) -> T.Tensor:
    """Binary cross-entropy on probabilities, summed over answers and batch.

    Terms whose target weight is zero are dropped, so ``p == t`` in {0, 1}
    contributes exactly 0.
    """
    p = T.as_tensor(scores)
    t = np.asarray(targets, dtype=p.data.dtype)
    if t.shape != p.shape:
        raise T.DimensionError(f"bce: scores {p.shape} vs targets {t.shape}")
    if (t < 0).any() or (t > 1).any():
        raise ValueError("bce targets must lie in [0, 1]")
    pd = p.data
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.where(t > 0, t * np.log(np.where(t > 0, pd, 1.0)), 0.0)
        neg = np.where(t < 1, (1 - t) * np.log(np.where(t < 1, 1 - pd, 1.0)), 0.0)
        grad = np.where(t > 0, -t / np.where(t > 0, pd, 1.0), 0.0) + np.where(t < 1, (1 - t) / np.where(t < 1, 1 - pd, 1.0), 0.0)
    return T._record(np.asarray(-(pos + neg).sum()), (p,), lambda g: (g * grad,), "bce_prob")


# --- model -------------------------------------------------------------------------------
class SceneGCN:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        p = self.params = ModelParams()
        self.question = QuestionEncoder(
            QuestionConfig(cfg.vocab_size, cfg.d_q, cfg.gru_layers, cfg.q_att, cfg.d_q, cfg.word_dim), rng, p)
        add_linear(p, "proj", cfg.d_obj, cfg.d, rng)
        if cfg.graph_conv:
            if cfg.implicit:
                add_linear(p, "implicit", 2 * cfg.d_obj, cfg.rel_dim, rng)
            else:
                p.add("unknown_edge", uniform_fan(rng, cfg.rel_dim, (cfg.rel_dim,)))
            p.add("satt.w_q.weight", uniform_fan(rng, cfg.d_q, (cfg.d_q, cfg.d_f)))
            p.add("satt.w_r.weight", uniform_fan(rng, cfg.rel_dim, (cfg.rel_dim, cfg.d_f)))
            add_linear(p, "satt.score", cfg.d_f, cfg.heads, rng)
            p.add("gcn.w.weight", uniform_fan(rng, cfg.d + cfg.rel_dim, (cfg.d + cfg.rel_dim, cfg.d)))
        p.add("oatt.w_q.weight", uniform_fan(rng, cfg.d_q, (cfg.d_q, cfg.d_f)))
        p.add("oatt.w_h.weight", uniform_fan(rng, cfg.d, (cfg.d, cfg.d_f)))
        add_linear(p, "oatt.score", cfg.d_f, 1, rng)
        p.add("answer.w_a.weight", uniform_fan(rng, cfg.d_q, (cfg.d_q, cfg.d)))
        add_linear(p, "answer.mlp1", cfg.d, cfg.mlp_hidden, rng)
        add_linear(p, "answer.mlp2", cfg.mlp_hidden, cfg.n_answers, rng)

    def edge_factors(self, batch: GraphBatch) -> EdgeEmbeddings:
        """Edge embeddings fed to the convolution: observed, learned unknown, or implicit."""
        p = self.params
        if self.cfg.implicit:
            h = batch.node_features
            d_obj = h.shape[-1]
            w = p["implicit.weight"]
            # [h_j ++ h_i] W = h_j W_top + h_i W_bottom
            return EdgeEmbeddings(src=T.matmul(h, w[:d_obj]), dst=T.matmul(h, w[d_obj:]), bias=p["implicit.bias"])
        if batch.edges.shape[-1] != self.cfg.rel_dim:
            raise T.DimensionError(f"edge width {batch.edges.shape[-1]} != configured {self.cfg.rel_dim}")
        n = batch.edges.shape[1]
        missing = ~batch.edge_known & ~np.eye(n, dtype=bool)
        if not missing.any():
            return EdgeEmbeddings(observed=batch.edges)
        observed = np.where(missing[..., None], 0.0, batch.edges)
        return EdgeEmbeddings(observed=observed, missing=missing, unknown=p["unknown_edge"])

    def relation_embeddings(self, batch: GraphBatch) -> T.Tensor:
        """Materialised ``B x N x N x R`` edge embeddings."""
        return self.edge_factors(batch).materialize()

    def forward(self, batch: GraphBatch, mode: str = "eval", rng=None) -> ForwardOutput:
        cfg, p = self.cfg, self.params
        q = self.question.encode_batch(batch.q_ids, batch.q_mask)
        h = T.Tensor(batch.node_features)
        h_p = project_nodes(h, p)
        omega = None
        if cfg.graph_conv:
            n = batch.node_mask.shape[1]
            valid = batch.node_mask[:, :, None] & batch.node_mask[:, None, :] & ~np.eye(n, dtype=bool)
            r = self.edge_factors(batch)
            omega = qr_self_attention(q, r, valid, p)
            h_s = graph_conv_fused(h_p, r, omega, p)
        else:
            h_s = T.relu(h_p)
        w_obj = q_object_attention(q, h_s, batch.node_mask, p)
        v_hat = aggregate(h_s, w_obj)
        logits = answer_logits(v_hat, q, p, cfg.dropout, mode, rng)
        return ForwardOutput(logits, T.sigmoid(logits), q, omega, w_obj, h_p, h_s, v_hat)

    def loss(self, batch: GraphBatch, targets: np.ndarray, mode: str = "train", rng=None):
        out = self.forward(batch, mode, rng)
        return T.bce_with_logits(out.logits, targets), out
