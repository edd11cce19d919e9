"""Scene graphs: object nodes joined by directed relation-embedding edges.

``edge_embeddings[j, i]`` is the embedding of the relation with subject
``j`` and object ``i``; node ``i`` receives messages along it from ``j``.
The graph is fully connected apart from self edges.  Pairs with no
observed relation are flagged in ``edge_known`` and carry the
unknown-relationship embedding.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import FormatError, no_grad

N_MAX = 36
REL_DIM = 512
FEATURE_MAGIC = b"SGF1"


class EmptySceneError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass
class SceneGraph:
    node_features: np.ndarray
    edge_embeddings: np.ndarray
    edge_known: np.ndarray
    boxes: np.ndarray | None = None
    edge_labels: np.ndarray | None = None

    def __post_init__(self):
        n = self.node_features.shape[0]
        if not 1 <= n:
            raise EmptySceneError("a scene graph needs at least one node")
        if self.edge_embeddings.shape[:2] != (n, n) or self.edge_known.shape != (n, n):
            raise ValueError(f"edge arrays must be {n} x {n} x R, got {self.edge_embeddings.shape}")
        if self.edge_known.diagonal().any():
            raise ValueError("self edges are not allowed")

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        n = self.n_nodes
        return n * (n - 1)

    @property
    def rel_dim(self) -> int:
        return self.edge_embeddings.shape[-1]

    def edges(self):
        """Iterate ordered pairs ``(j, i)`` with ``j != i``."""
        n = self.n_nodes
        return ((j, i) for j in range(n) for i in range(n) if j != i)

    def permute(self, perm) -> "SceneGraph":
        """Relabel nodes so that new node ``k`` is old node ``perm[k]``."""
        perm = np.asarray(perm)
        grid = np.ix_(perm, perm)
        return SceneGraph(
            node_features=self.node_features[perm],
            edge_embeddings=self.edge_embeddings[grid],
            edge_known=self.edge_known[grid],
            boxes=None if self.boxes is None else self.boxes[perm],
            edge_labels=None if self.edge_labels is None else self.edge_labels[grid],
        )


def _truncate(n: int, n_max: int, scores) -> np.ndarray:
    if scores is None:
        keep = np.arange(n_max)
    else:
        keep = np.sort(np.argsort(-np.asarray(scores), kind="stable")[:n_max])
    warnings.warn(f"scene has {n} objects; keeping {n_max}", stacklevel=3)
    return keep


def build_graph(node_features, pair_regions: Mapping, encoder=None, boxes=None, scores=None,
                n_max: int = N_MAX, rel_dim: int = REL_DIM, unknown=None, edge_labels=None) -> SceneGraph:
    """Assemble a fully connected scene graph.

    ``pair_regions[(j, i)]`` holds ``(x_s, x_o, x_r)`` feature maps for the
    ordered pair; pairs that are missing (or map to ``None``) become
    unknown-relationship edges filled with ``unknown`` (zeros by default).
    """
    feats = np.asarray(node_features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise EmptySceneError("no objects in scene")
    n = feats.shape[0]
    index = np.arange(n)
    if n > n_max:
        index = _truncate(n, n_max, scores)
        feats = feats[index]
        boxes = None if boxes is None else np.asarray(boxes)[index]
        edge_labels = None if edge_labels is None else np.asarray(edge_labels)[np.ix_(index, index)]
        n = n_max
    old_to_new = {int(o): k for k, o in enumerate(index)}

    if encoder is not None:
        rel_dim = encoder.cfg.embed_dim
    unknown = np.zeros(rel_dim) if unknown is None else np.asarray(unknown, dtype=np.float64)
    edges = np.zeros((n, n, rel_dim))
    known = np.zeros((n, n), dtype=bool)
    pairs, maps = [], []
    for (j, i), region in pair_regions.items():
        if region is None or j == i or j not in old_to_new or i not in old_to_new:
            continue
        pairs.append((old_to_new[j], old_to_new[i]))
        maps.append(region)
    if pairs:
        if encoder is None:
            raise ValueError("pair regions given but no relation encoder")
        with no_grad():
            r = encoder.encode_relation(np.stack([m[0] for m in maps]), np.stack([m[1] for m in maps]),
                                        np.stack([m[2] for m in maps])).data
        for (j, i), vec in zip(pairs, r):
            edges[j, i] = vec
            known[j, i] = True
    off_diag = ~np.eye(n, dtype=bool)
    edges[off_diag & ~known] = unknown
    return SceneGraph(feats, edges, known, None if boxes is None else np.asarray(boxes, dtype=np.float64),
                      None if edge_labels is None else np.asarray(edge_labels))


# --- feature container --------------------------------------------------------------
def _check_boxes(boxes: np.ndarray) -> None:
    bad = np.flatnonzero((boxes[:, 0] >= boxes[:, 2]) | (boxes[:, 1] >= boxes[:, 3]))
    if bad.size:
        raise ValidationError(f"boxes {bad.tolist()} violate x1 < x2 and y1 < y2")


def features_to_bytes(features, boxes=None) -> bytes:
    feats = np.ascontiguousarray(features, dtype="<f8")
    n, d = feats.shape
    out = FEATURE_MAGIC + struct.pack("<IIB", n, d, boxes is not None) + feats.tobytes()
    if boxes is not None:
        b = np.ascontiguousarray(boxes, dtype="<f8")
        if b.shape != (n, 4):
            raise ValueError(f"boxes must be {n} x 4, got {b.shape}")
        out += b.tobytes()
    return out


def features_from_bytes(buf: bytes, n_max: int = N_MAX) -> tuple[np.ndarray, np.ndarray | None]:
    if len(buf) < 4 or buf[:4] != FEATURE_MAGIC:
        raise FormatError("bad feature-container magic", 0)
    if len(buf) < 13:
        raise FormatError("truncated feature-container header", len(buf))
    n, d, has_boxes = struct.unpack_from("<IIB", buf, 4)
    if has_boxes not in (0, 1):
        raise FormatError(f"has_boxes flag must be 0 or 1, got {has_boxes}", 12)
    pos = 13
    need = 8 * n * d
    if len(buf) < pos + need:
        raise FormatError(f"truncated node features: need {need} bytes, have {len(buf) - pos}", len(buf))
    feats = np.frombuffer(buf, dtype="<f8", count=n * d, offset=pos).reshape(n, d).astype(np.float64)
    pos += need
    boxes = None
    if has_boxes:
        if len(buf) < pos + 32 * n:
            raise FormatError(f"truncated boxes: need {32 * n} bytes, have {len(buf) - pos}", len(buf))
        boxes = np.frombuffer(buf, dtype="<f8", count=4 * n, offset=pos).reshape(n, 4).astype(np.float64)
        pos += 32 * n
    if pos != len(buf):
        raise FormatError("trailing bytes after feature container", pos)
    if n > n_max:
        raise ValidationError(f"{n} objects exceeds the cap of {n_max}")
    if boxes is not None:
        _check_boxes(boxes)
    return feats, boxes


def save_features(path, features, boxes=None) -> None:
    with open(path, "wb") as fh:
        fh.write(features_to_bytes(features, boxes))


def load_features(path, n_max: int = N_MAX) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return features_from_bytes(buf, n_max)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc.args[0].rsplit(' (byte', 1)[0]}", exc.offset) from None
