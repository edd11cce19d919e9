"""Visual relationship encoder aligned with language annotations.

Visual module: a 1x1 projection followed by three valid 3x3 convolutions
(7 -> 5 -> 3 -> 1) with projected shortcut connections, then a fully
connected head.  The subject and object branches share every weight.  The
relation branch has its own convolution stack; its head reads the relation
map features together with the subject and object features, which makes
the embedding sensitive to direction.

Language module: word embeddings, one GRU shared by all three branches and
a shared projection to the embedding width.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .params import ModelParams, add_linear, linear, uniform_fan
from .text import EMBED_DIM, InputError, Vocabulary, add_embedding, add_gru, embed, gru_encode_batch, pad_batch

SPATIAL = 7


@dataclass
class RelationSample:
    x_s: np.ndarray
    x_o: np.ndarray
    x_r: np.ndarray
    l_s: list[str]
    l_o: list[str]
    l_r: list[str]

    def __post_init__(self):
        for name in ("x_s", "x_o", "x_r"):
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape[1:] != (SPATIAL, SPATIAL):
                raise ValueError(f"{name} must be c x 7 x 7, got {arr.shape}")
        if not (self.l_s and self.l_o and self.l_r):
            raise InputError("relation annotations must be nonempty")


@dataclass(frozen=True)
class RelationEncoderConfig:
    vocab_size: int
    in_channels: int = 16
    conv_channels: int = 32
    embed_dim: int = 512
    word_dim: int = EMBED_DIM
    gru_hidden: int = 128


@dataclass(frozen=True)
class RelationLossConfig:
    margin: float = 0.2
    n_pos: int = 64
    n_neg: int = 16
    sim_scale: float = 1.0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.n_pos < 1 or self.n_neg < 1:
            raise ValueError("n_pos and n_neg must be >= 1")


class RelationEncoder:
    def __init__(self, cfg: RelationEncoderConfig, vocab: Vocabulary, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab = vocab
        p = self.params = ModelParams()
        c, C = cfg.in_channels, cfg.conv_channels
        for branch in ("so", "rel"):
            p.add(f"{branch}.proj.kernel", uniform_fan(rng, c, (C, c, 1, 1)))
            p.add(f"{branch}.proj.bias", np.zeros((C, 1, 1)))
            for k in range(3):
                p.add(f"{branch}.conv{k}.kernel", uniform_fan(rng, 9 * C, (C, C, 3, 3)))
                p.add(f"{branch}.conv{k}.bias", np.zeros((C, 1, 1)))
                p.add(f"{branch}.skip{k}.kernel", uniform_fan(rng, C, (C, C, 1, 1)))
        add_linear(p, "so.head", C, cfg.embed_dim, rng)
        add_linear(p, "rel.head", 3 * C, cfg.embed_dim, rng)
        add_embedding(p, "lang.embed", cfg.vocab_size, rng, cfg.word_dim)
        add_gru(p, "lang.gru", cfg.word_dim, cfg.gru_hidden, rng, layers=1)
        add_linear(p, "lang.proj", cfg.gru_hidden, cfg.embed_dim, rng)

    # --- visual module ---------------------------------------------------------
    def _stack(self, x: T.Tensor, branch: str) -> T.Tensor:
        p = self.params
        y = T.relu(T.conv2d(x, p[f"{branch}.proj.kernel"]) + p[f"{branch}.proj.bias"])
        for k in range(3):
            main = T.conv2d(y, p[f"{branch}.conv{k}.kernel"]) + p[f"{branch}.conv{k}.bias"]
            shortcut = T.conv2d(y[:, :, 1:-1, 1:-1], p[f"{branch}.skip{k}.kernel"])
            y = T.relu(main + shortcut)
        return T.reshape(y, (y.shape[0], y.shape[1]))

    def _check(self, x) -> T.Tensor:
        x = T.as_tensor(x)
        if x.ndim == 3:
            x = T.expand_dims(x, 0)
        if x.shape[1] != self.cfg.in_channels:
            raise T.DimensionError(
                f"feature map has {x.shape[1]} channels, encoder expects {self.cfg.in_channels} (shape {x.shape})")
        if x.shape[2:] != (SPATIAL, SPATIAL):
            raise T.DimensionError(f"feature map must be 7x7, got {x.shape}")
        return x

    def visual_forward(self, x_s, x_o, x_r) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
        """Return (v_s, v_o, v_r), each ``B x embed_dim`` (or ``embed_dim`` for unbatched input)."""
        single = np.ndim(x_s.data if isinstance(x_s, T.Tensor) else x_s) == 3
        x_s, x_o, x_r = self._check(x_s), self._check(x_o), self._check(x_r)
        f_s = self._stack(x_s, "so")
        f_o = self._stack(x_o, "so")
        f_r = self._stack(x_r, "rel")
        v_s = linear(f_s, self.params, "so.head")
        v_o = linear(f_o, self.params, "so.head")
        v_r = linear(T.concat([f_r, f_s, f_o], axis=-1), self.params, "rel.head")
        if single:
            return v_s[0], v_o[0], v_r[0]
        return v_s, v_o, v_r

    def encode_relation(self, x_s, x_o, x_r) -> T.Tensor:
        return self.visual_forward(x_s, x_o, x_r)[2]

    # --- language module ---------------------------------------------------------
    def language_forward_ids(self, seqs: Sequence[Sequence[int]]) -> T.Tensor:
        if any(len(s) == 0 for s in seqs):
            raise InputError("empty annotation")
        ids, mask = pad_batch(seqs)
        x = embed(ids, self.params["lang.embed"])
        _, final = gru_encode_batch(x, mask, self.params, "lang.gru")
        return linear(final, self.params, "lang.proj")

    def language_forward(self, tokens: Sequence[str]) -> T.Tensor:
        if len(tokens) == 0:
            raise InputError("empty annotation")
        return self.language_forward_ids([self.vocab.encode(tokens)])[0]

    def language_batch(self, annotations: Sequence[Sequence[str]]) -> T.Tensor:
        """Embed many annotations, running the GRU once per distinct annotation."""
        keys = [tuple(a) for a in annotations]
        uniq = list(dict.fromkeys(keys))
        where = {k: i for i, k in enumerate(uniq)}
        table = self.language_forward_ids([self.vocab.encode(k) for k in uniq])
        return T.take_rows(table, np.array([where[k] for k in keys]))

    # --- retrieval -----------------------------------------------------------------
    def predicate_table(self, lexicon: Sequence[Sequence[str]]) -> np.ndarray:
        if len(lexicon) == 0:
            raise InputError("predicate lexicon is empty")
        with T.no_grad():
            return self.language_forward_ids([self.vocab.encode(p) for p in lexicon]).data

    def predict_predicate(self, r, lexicon: Sequence[Sequence[str]], table: np.ndarray | None = None):
        """Return (lexicon index, cosine similarity) of the best-matching predicate.

        ``r`` may be one embedding or a ``B x E`` batch; ties go to the lowest index.
        """
        table = self.predicate_table(lexicon) if table is None else table
        r = np.asarray(r.data if isinstance(r, T.Tensor) else r)
        single = r.ndim == 1
        with T.no_grad():
            sims = T.cosine_similarity(np.atleast_2d(r)[:, None, :], table[None]).data
        best = sims.argmax(axis=1)  # argmax returns the first maximum
        score = sims[np.arange(len(best)), best]
        if single:
            return int(best[0]), float(score[0])
        return best, score


# --- losses -----------------------------------------------------------------------
def triplet_loss(v: T.Tensor, l: T.Tensor, v_neg: T.Tensor, margin: float) -> T.Tensor:
    """Mean hinge ``max(0, m - s(v_i, l_i) + s(v_ij^-, l_i))`` over positives i and negatives j."""
    s_pos = T.cosine_similarity(v, l)
    s_neg = T.cosine_similarity(v_neg, T.expand_dims(l, 1))
    return T.mean(T.relu(margin - T.expand_dims(s_pos, 1) + s_neg))


def triplet_softmax_loss(v: T.Tensor, l: T.Tensor, l_neg: T.Tensor, scale: float = 1.0) -> T.Tensor:
    """Mean of ``-log softmax`` of the positive similarity against negative annotations."""
    s_pos = T.cosine_similarity(v, l)
    s_neg = T.cosine_similarity(T.expand_dims(v, 1), l_neg)
    if scale != 1.0:
        s_pos, s_neg = s_pos * scale, s_neg * scale
    logits = T.concat([T.expand_dims(s_pos, 1), s_neg], axis=1)
    return T.mean(T.logsumexp(logits, axis=1) - s_pos)


@dataclass
class NegativeStats:
    with_replacement: int = 0


def sample_negatives(labels: Sequence, n_neg: int, rng: np.random.Generator,
                     stats: NegativeStats | None = None) -> np.ndarray:
    """For each entry draw ``n_neg`` batch indices whose label differs.

    Draws are uniform without replacement; when fewer than ``n_neg``
    candidates exist they are drawn with replacement and counted in ``stats``.
    """
    keys = [tuple(x) if isinstance(x, (list, tuple)) else x for x in labels]
    index: dict = {}
    codes = np.array([index.setdefault(k, len(index)) for k in keys])
    if len(index) < 2:
        raise ValueError("negative sampling needs at least two distinct labels in the batch")
    out = np.empty((len(keys), n_neg), dtype=np.int64)
    for i, c in enumerate(codes):
        eligible = np.flatnonzero(codes != c)
        replace = len(eligible) < n_neg
        if replace and stats is not None:
            stats.with_replacement += 1
        out[i] = rng.choice(eligible, size=n_neg, replace=replace)
    return out


@dataclass
class RelationLossTerms:
    total: T.Tensor
    terms: dict = field(default_factory=dict)


def total_relation_loss(encoder: RelationEncoder, batch: Sequence[RelationSample], cfg: RelationLossConfig,
                        rng: np.random.Generator, stats: NegativeStats | None = None) -> RelationLossTerms:
    """Sum over subject, object and relation branches of triplet + triplet-softmax losses."""
    x_s = np.stack([b.x_s for b in batch])
    x_o = np.stack([b.x_o for b in batch])
    x_r = np.stack([b.x_r for b in batch])
    visual = encoder.visual_forward(x_s, x_o, x_r)
    terms = {}
    total = None
    for name, v, ann in zip(("s", "o", "r"), visual,
                            ([b.l_s for b in batch], [b.l_o for b in batch], [b.l_r for b in batch])):
        l = encoder.language_batch(ann)
        neg = sample_negatives(ann, cfg.n_neg, rng, stats)
        tr = triplet_loss(v, l, T.take_rows(v, neg), cfg.margin)
        sm = triplet_softmax_loss(v, l, T.take_rows(l, neg), cfg.sim_scale)
        terms[f"{name}_triplet"] = tr
        terms[f"{name}_softmax"] = sm
        branch = tr + sm
        total = branch if total is None else total + branch
    return RelationLossTerms(total, terms)


# --- dataset files ------------------------------------------------------------------
def save_relation_dataset(directory, samples: Sequence[RelationSample]) -> Path:
    """Write ``manifest.jsonl`` plus one SGT1 tensor (3 x c x 7 x 7) per sample."""
    directory = Path(directory)
    (directory / "maps").mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for i, s in enumerate(samples):
            rel = f"maps/{i:06d}.sgt"
            T.save_tensor(directory / rel, np.stack([s.x_s, s.x_o, s.x_r]))
            fh.write(json.dumps({"maps": rel, "subject": s.l_s, "object": s.l_o, "predicate": s.l_r}) + "\n")
    return manifest


def load_relation_dataset(directory) -> list[RelationSample]:
    directory = Path(directory)
    samples = []
    with open(directory / "manifest.jsonl", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            rec = json.loads(line)
            try:
                maps = T.load_tensor(directory / rec["maps"])
            except T.FormatError as exc:
                raise T.FormatError(f"{directory / rec['maps']} (manifest line {lineno}): {exc}", exc.offset) from None
            samples.append(RelationSample(maps[0], maps[1], maps[2], rec["subject"], rec["object"], rec["predicate"]))
    return samples
