"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .params import ModelParams
from .tensor import Tensor, backward, no_grad


class DeterminismError(RuntimeError):
    """Two identical forward passes disagreed."""


@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    coords_checked: dict[str, int] = field(default_factory=dict)
    kinks_skipped: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.max_rel_error.values())

    @property
    def worst(self) -> tuple[str, float]:
        if not self.max_rel_error:
            return "", 0.0
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]

    def __str__(self) -> str:
        name, err = self.worst
        status = "PASS" if self.passed else "FAIL"
        skipped = sum(self.kinks_skipped.values())
        extra = f", {skipped} coords at kinks skipped" if skipped else ""
        return f"{status}: {len(self.max_rel_error)} tensors, worst {name} rel-err {err:.3e} (tol {self.tol:g}){extra}"


def _as_mapping(params) -> Mapping[str, Tensor]:
    if isinstance(params, ModelParams):
        return params.trainable()
    if isinstance(params, Mapping):
        return params
    return {f"arg{i}": t for i, t in enumerate(params)}


def finite_diff_check(
    f: Callable[[], Tensor],
    params,
    eps: float = 1e-5,
    tol: float = 1e-5,
    max_coords: int = 64,
    floor: float = 1e-7,
    rng: np.random.Generator | None = None,
    kink_jump: float | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``params`` is a :class:`ModelParams`, a name->Tensor mapping or a list of
    tensors.  Tensors with more than ``max_coords`` entries are checked on a
    random sample of ``max_coords`` coordinates.  The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    coordinates whose true gradient is ~0 from amplifying round-off.

    A coordinate whose forward and backward one-sided slopes differ by more
    than ``kink_jump`` (relative; defaults to ``tol``) straddles a kink such
    as relu at 0.  It is
    retried with a step 100x smaller and skipped (and counted) if the kink
    is still inside the stencil.
    """
    rng = rng or np.random.default_rng(0)
    kink_jump = tol if kink_jump is None else kink_jump
    tensors = _as_mapping(params)
    for t in tensors.values():
        t.zero_grad()
    loss = f()
    with no_grad():
        again = f()
    if not np.array_equal(loss.data, again.data):
        raise DeterminismError("f() returned different values on two identical calls")
    backward(loss)
    base = float(loss.data)

    report = GradCheckReport(tol=tol)
    for name, t in tensors.items():
        analytic = t.grad.copy()
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        worst = 0.0
        checked = skipped = 0
        with no_grad():
            for c in coords:
                numeric = None
                for h in (eps, eps / 100):
                    numeric = _central(f, flat, c, h, base, kink_jump)
                    if numeric is not None:
                        break
                if numeric is None:
                    skipped += 1
                    continue
                a = analytic.reshape(-1)[c]
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
                checked += 1
        report.max_rel_error[name] = worst if checked else float("inf")
        report.coords_checked[name] = checked
        if skipped:
            report.kinks_skipped[name] = skipped
    return report


def _central(f, flat: np.ndarray, c: int, h: float, base: float, kink_jump: float) -> float | None:
    """Central difference at coordinate ``c``, or None when a kink lies in [x-h, x+h]."""
    orig = flat[c]
    flat[c] = orig + h
    up = float(f().data)
    flat[c] = orig - h
    down = float(f().data)
    flat[c] = orig
    fwd, bwd = (up - base) / h, (base - down) / h
    jump = abs(fwd - bwd)
    if jump > kink_jump * max(abs(fwd), abs(bwd)) and jump > 1e-6:
        return None
    return (up - down) / (2 * h)
