"""Token vocabularies, word embeddings and GRU sequence encoders."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .params import ModelParams, add_linear, linear, uniform_fan

UNK, PAD = "<unk>", "<pad>"
UNK_ID, PAD_ID = 0, 1
EMBED_DIM = 300


class VocabularyError(KeyError):
    pass


class InputError(ValueError):
    pass


class Vocabulary:
    """Token <-> index map with UNK at 0 and PAD at 1."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [UNK, PAD]
        self.stoi: dict[str, int] = {UNK: UNK_ID, PAD: PAD_ID}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[2:]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def tokenize(text: str) -> list[str]:
    return text.lower().replace("?", " ?").split()


def load_embedding_text(path, vocab: Vocabulary, dim: int = EMBED_DIM) -> tuple[np.ndarray, np.ndarray]:
    """Read ``token v1 ... v_dim`` lines; return (rows for vocab, found mask).

    Tokens absent from the file keep zero rows; callers decide how to fill them.
    """
    table = np.zeros((len(vocab), dim))
    found = np.zeros(len(vocab), dtype=bool)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1:
                raise InputError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            idx = vocab.stoi.get(parts[0])
            if idx is not None:
                table[idx] = np.asarray(parts[1:], dtype=np.float64)
                found[idx] = True
    return table, found


# --- embeddings -----------------------------------------------------------------
def add_embedding(params: ModelParams, path: str, vocab_size: int, rng, dim: int = EMBED_DIM,
                  trainable: bool = True) -> None:
    params.add(path, rng.uniform(-0.05, 0.05, size=(vocab_size, dim)), trainable=trainable)


def embed(tokens, table: T.Tensor) -> T.Tensor:
    """Row-gather ``table[tokens]``; tokens may be a sequence or a padded batch."""
    idx = np.asarray(tokens, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise VocabularyError(f"token index out of range for vocabulary of size {table.shape[0]}")
    if idx.size == 0:
        return T.Tensor(np.zeros(idx.shape + (table.shape[1],)))
    return T.take_rows(table, idx)


# --- GRU --------------------------------------------------------------------------
def add_gru(params: ModelParams, path: str, d_in: int, hidden: int, rng, layers: int = 1) -> None:
    if layers not in (1, 2):
        raise ValueError("GRU layer count must be 1 or 2")
    for layer in range(layers):
        n_in = d_in if layer == 0 else hidden
        p = f"{path}.l{layer}"
        # gate order along the last axis: update z, reset r, candidate n
        params.add(f"{p}.w_ih", uniform_fan(rng, hidden, (n_in, 3 * hidden)))
        params.add(f"{p}.w_hzr", uniform_fan(rng, hidden, (hidden, 2 * hidden)))
        params.add(f"{p}.w_hn", uniform_fan(rng, hidden, (hidden, hidden)))
        params.add(f"{p}.bias", np.zeros(3 * hidden))


def gru_layers(params: ModelParams, path: str) -> int:
    return sum(1 for k in params if k.startswith(f"{path}.l") and k.endswith(".w_ih"))


def _gru_layer(x: T.Tensor, mask: np.ndarray, params: ModelParams, p: str) -> T.Tensor:
    w_hzr = params[f"{p}.w_hzr"]
    w_hn = params[f"{p}.w_hn"]
    hidden = w_hn.shape[0]
    B, steps = x.shape[0], x.shape[1]
    xg = T.matmul(x, params[f"{p}.w_ih"]) + params[f"{p}.bias"]  # B x T x 3h
    h = T.Tensor(np.zeros((B, hidden), dtype=x.data.dtype))
    states = []
    for t in range(steps):
        xt = xg[:, t]
        x_zr, x_n = xt[:, :2 * hidden], xt[:, 2 * hidden:]
        zr = T.sigmoid(x_zr + T.matmul(h, w_hzr))
        z, r = zr[:, :hidden], zr[:, hidden:]
        n = T.tanh(x_n + T.matmul(r * h, w_hn))
        # (1 - z) * h + z * n
        h_new = h + z * (n - h)
        m = mask[:, t:t + 1]
        h = h_new if m.all() else h_new * m + h * (1.0 - m)
        states.append(h)
    return T.stack(states, axis=1)


def gru_encode_batch(x: T.Tensor, mask: np.ndarray, params: ModelParams, path: str) -> tuple[T.Tensor, T.Tensor]:
    """Run the (stacked) GRU over a padded batch ``B x T x d_in``.

    Per step: ``z, r = sigmoid(W x + U h + b)``, candidate
    ``n = tanh(W_n x + U_n (r * h) + b_n)`` and ``h = (1 - z) * h + z * n``,
    starting from ``h = 0``.

    ``mask`` is ``B x T`` with ones on real tokens.  Padded steps carry the
    previous state forward, so the state at the last step is the state after
    each sequence's final real token.
    """
    mask = np.asarray(mask, dtype=x.data.dtype)
    out = x
    for layer in range(gru_layers(params, path)):
        out = _gru_layer(out, mask, params, f"{path}.l{layer}")
    return out, out[:, -1]


def gru_encode(x: T.Tensor, params: ModelParams, path: str) -> tuple[T.Tensor, T.Tensor]:
    """Encode one sequence ``T x d_in``; return (``T x h`` states, final state)."""
    if x.shape[0] < 1:
        raise InputError("gru_encode needs at least one time step")
    states, final = gru_encode_batch(T.expand_dims(x, 0), np.ones((1, x.shape[0])), params, path)
    return states[0], final[0]


def pad_batch(seqs: Sequence[Sequence[int]], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    length = length or max(len(s) for s in seqs)
    ids = np.full((len(seqs), length), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), length))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


# --- question encoder ---------------------------------------------------------------
@dataclass(frozen=True)
class QuestionConfig:
    vocab_size: int
    hidden: int = 512
    layers: int = 1
    attention: bool = False
    att_hidden: int = 512
    embed_dim: int = EMBED_DIM


class QuestionEncoder:
    """Word embeddings -> GRU -> question vector (final state or attentive pooling).

    The attentive variant scores each token state with
    ``w . relu(W state)``, masks PAD positions and pools with the softmax weights.
    """

    def __init__(self, cfg: QuestionConfig, rng: np.random.Generator, params: ModelParams | None = None,
                 prefix: str = "question"):
        self.cfg = cfg
        self.prefix = prefix
        self.params = params if params is not None else ModelParams()
        p = self.params
        add_embedding(p, f"{prefix}.embed", cfg.vocab_size, rng, cfg.embed_dim)
        add_gru(p, f"{prefix}.gru", cfg.embed_dim, cfg.hidden, rng, cfg.layers)
        if cfg.attention:
            add_linear(p, f"{prefix}.att_proj", cfg.hidden, cfg.att_hidden, rng)
            add_linear(p, f"{prefix}.att_score", cfg.att_hidden, 1, rng, bias=False)

    def attention_weights(self, states: T.Tensor, mask: np.ndarray) -> T.Tensor:
        scores = linear(T.relu(linear(states, self.params, f"{self.prefix}.att_proj")),
                        self.params, f"{self.prefix}.att_score")
        scores = T.reshape(scores, scores.shape[:-1])
        return T.softmax(scores, axis=-1, mask=np.asarray(mask) > 0)

    def encode_batch(self, ids: np.ndarray, mask: np.ndarray, return_weights: bool = False):
        ids = np.asarray(ids)
        if ids.shape[1] == 0 or (np.asarray(mask).sum(axis=1) == 0).any():
            raise InputError("empty question")
        x = embed(ids, self.params[f"{self.prefix}.embed"])
        states, final = gru_encode_batch(x, mask, self.params, f"{self.prefix}.gru")
        weights = None
        if self.cfg.attention:
            weights = self.attention_weights(states, mask)
            q = T.tsum(T.expand_dims(weights, -1) * states, axis=1)
        else:
            q = final
        return (q, weights) if return_weights else q

    def encode(self, tokens: Sequence[int]) -> T.Tensor:
        if len(tokens) == 0:
            raise InputError("empty question")
        ids, mask = pad_batch([tokens])
        return self.encode_batch(ids, mask)[0]


def encode_question(tokens: Sequence[int], encoder: QuestionEncoder) -> T.Tensor:
    return encoder.encode(tokens)
