"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, no_grad


@dataclass
class GradcheckReport:
    names: list[str]
    rel_errors: list[np.ndarray] = field(repr=False)
    tol: float

    @property
    def max_rel_error(self) -> float:
        return max((float(e.max()) for e in self.rel_errors if e.size), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def worst(self) -> dict[str, float]:
        return {n: float(e.max()) if e.size else 0.0 for n, e in zip(self.names, self.rel_errors)}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps zero gradients well-defined."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-3,
                 indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x.data`` (perturbed in place)."""
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor] | dict[str, Tensor], h: float = 1e-3,
              tol: float = 1e-4, floor: float = 1e-6, max_elements: int | None = None,
              rng: np.random.Generator | None = None) -> GradcheckReport:
    """Compare ``backward`` against central differences for every tensor in ``inputs``.

    ``f`` closes over the inputs and must return a scalar.  Run in 64-bit mode.
    With ``max_elements`` only a random subset of each tensor's entries is probed.
    """
    if isinstance(inputs, dict):
        names, tensors = list(inputs), list(inputs.values())
    else:
        tensors = list(inputs)
        names = [f"input{i}" for i in range(len(tensors))]
    for t in tensors:
        if not t.requires_grad:
            raise ValueError("gradcheck inputs must require grad")
        t.zero_grad()
    loss = f()
    if loss.size != 1:
        raise ShapeError("gradcheck needs a scalar-valued function")
    loss.backward()
    rng = rng or np.random.default_rng(0)
    errors = []
    for t in tensors:
        analytic = t.grad.astype(np.float64).reshape(-1)
        if max_elements is not None and t.size > max_elements:
            idx = np.sort(rng.choice(t.size, size=max_elements, replace=False))
        else:
            idx = np.arange(t.size)
        numeric = numeric_grad(f, t, h, idx).reshape(-1)
        errors.append(relative_error(analytic[idx], numeric[idx], floor))
    return GradcheckReport(names, errors, tol)
