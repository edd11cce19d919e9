"""Adam / Adamax with decoupled weight decay, and global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ModelParams
from .tensor import ContractError


@dataclass
class OptimizerState:
    kind: str = "adamax"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_decay: float = 1.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)  # second moment (adam) or infinity norm (adamax)
    t: dict = field(default_factory=dict)  # per-parameter update counts

    def __post_init__(self):
        if self.kind not in ("adam", "adamax"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def scalars(self) -> dict:
        return {k: getattr(self, k) for k in ("kind", "lr", "beta1", "beta2", "eps", "weight_decay", "lr_decay", "step")}


def _update(p: np.ndarray, g: np.ndarray, name: str, state: OptimizerState) -> None:
    b1, b2 = state.beta1, state.beta2
    m = state.m.setdefault(name, np.zeros_like(p))
    v = state.v.setdefault(name, np.zeros_like(p))
    t = state.t.get(name, 0) + 1
    state.t[name] = t
    m *= b1
    m += (1 - b1) * g
    if state.kind == "adamax":
        np.maximum(b2 * v, np.abs(g), out=v)
        step = (state.lr / (1 - b1 ** t)) * m / (v + state.eps)
    else:
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        step = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if state.weight_decay:
        p -= state.lr * state.weight_decay * p
    p -= step


def optimizer_step(params: ModelParams, state: OptimizerState, grads: dict | None = None) -> None:
    """Apply one update in place.

    A tensor whose gradient is identically zero is skipped entirely (its
    value, moments and bias-correction count are untouched), so a step with
    no gradient signal never moves a parameter.  The global step counter
    always advances.
    """
    for name, t in params.trainable().items():
        g = t.grad if grads is None else grads[name]
        if g is None:
            continue
        if g.shape != t.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, parameter has {t.shape}")
        if not g.any():
            continue
        _update(t.data, g, name, state)
    state.step += 1


def adamax_step(params: ModelParams, state: OptimizerState, grads: dict | None = None) -> None:
    if state.kind != "adamax":
        raise ValueError("adamax_step needs an adamax state")
    optimizer_step(params, state, grads)


def adam_step(params: ModelParams, state: OptimizerState, grads: dict | None = None) -> None:
    if state.kind != "adam":
        raise ValueError("adam_step needs an adam state")
    optimizer_step(params, state, grads)


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads if g is not None)))


def clip_gradients(params: ModelParams, max_norm: float = 0.25) -> tuple[float, float]:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns (norm before clipping, applied scale).
    """
    grads = [t.grad for t in params.trainable().values()]
    norm = global_norm(grads)
    scale = 1.0
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            if g is not None:
                g *= scale
    return norm, scale


def epoch_lr(base_lr: float, decay: float, epoch: int) -> float:
    return base_lr * decay ** epoch
