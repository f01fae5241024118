"""Central finite-difference verification of reverse-mode gradients.

The checker evaluates the loss twice per probed coordinate (x ± eps) and
compares the slope against the gradient produced by ``backward()``. It is
deliberately independent of the autodiff rules it certifies: it only ever
calls the forward function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float = 0.0
    worst_leaf: str = ""
    checked_coords: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    """|a - n| over max(|a|, |n|, floor); the floor keeps near-zero slopes honest."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    fn: Callable[[], Tensor],
    leaves: Mapping[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_leaf: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backward() gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the graph from the current leaf values on every
    call. Every leaf is probed; within a leaf, coordinates are subsampled
    when ``max_coords_per_leaf`` is set (deterministic given ``rng``).
    """
    for leaf in leaves.values():
        if leaf.dtype != np.float64:
            raise ValueError("gradient checks require float64 leaves")
        leaf.zero_grad()
    loss = fn()
    loss.backward()
    analytic = {
        name: (np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy())
        for name, leaf in leaves.items()
    }

    report = GradCheckReport()
    rng = rng or np.random.default_rng(0)
    for name, leaf in leaves.items():
        flat = leaf.data.reshape(-1)
        n = flat.size
        if max_coords_per_leaf is not None and n > max_coords_per_leaf:
            coords: Sequence[int] = rng.choice(n, size=max_coords_per_leaf, replace=False)
        else:
            coords = range(n)
        for i in coords:
            saved = flat[i]
            flat[i] = saved + eps
            up = fn().item()
            flat[i] = saved - eps
            down = fn().item()
            flat[i] = saved
            numeric = (up - down) / (2 * eps)
            a = float(analytic[name].reshape(-1)[i])
            err = relative_error(a, numeric)
            report.checked_coords += 1
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst_leaf = f"{name}[{i}]"
            if err > tol:
                report.failures.append(
                    f"{name}[{i}]: analytic {a:.6e} vs numeric {numeric:.6e} (rel {err:.2e})"
                )
    return report
