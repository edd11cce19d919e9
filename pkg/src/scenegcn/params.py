"""Named parameter collections and the layer helpers that read from them."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor, add, matmul


class ModelParams:
    """Ordered ``path -> Tensor`` mapping of trainable tensors.

    Paths are dotted (``"gcn.w_k"``).  Sub-collections share tensors with
    the parent, which is how weight sharing is expressed: two names may
    point at the same tensor object only through :meth:`alias`.
    """

    def __init__(self):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, path: str, data, trainable: bool = True) -> Tensor:
        if path in self._tensors:
            raise KeyError(f"parameter {path!r} already exists")
        t = Tensor(data, requires_grad=trainable, name=path)
        self._tensors[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def trainable(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, t) for k, t in self._tensors.items() if t.requires_grad)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def num_elements(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self._tensors.items())

    def load_state(self, state) -> None:
        missing = set(self._tensors) - set(state)
        extra = set(state) - set(self._tensors)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, arr in state.items():
            t = self._tensors[k]
            arr = np.asarray(arr, dtype=t.data.dtype)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k!r}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()
            t.zero_grad()

    def update(self, other: "ModelParams", prefix: str = "") -> None:
        for k, t in other.items():
            key = prefix + k
            if key in self._tensors:
                raise KeyError(f"parameter {key!r} already exists")
            self._tensors[key] = t


def uniform_fan(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_linear(params: ModelParams, path: str, n_in: int, n_out: int, rng, bias: bool = True) -> None:
    params.add(f"{path}.weight", uniform_fan(rng, n_in, (n_in, n_out)))
    if bias:
        params.add(f"{path}.bias", np.zeros(n_out))


def linear(x, params: ModelParams, path: str) -> Tensor:
    out = matmul(x, params[f"{path}.weight"])
    bias = f"{path}.bias"
    if bias in params:
        out = add(out, params[bias])
    return out
