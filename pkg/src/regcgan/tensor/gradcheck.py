"""Central finite-difference checks for recorded gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import Graph, Tensor, backward


@dataclass
class GradCheckReport:
    max_error: float
    errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float
    failing: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failing


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, tol: float = 1e-3,
               coords: Optional[np.ndarray] = None) -> GradCheckReport:
    """Compare the recorded gradient of scalar ``f`` at ``x`` to central differences.

    ``coords`` optionally restricts the comparison to a subset of flat
    indices (large parameter tensors).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    g = Graph()
    leaf = g.leaf(x.copy())
    analytic = backward(g, f(leaf))[leaf].ravel()

    idx = np.arange(x.size) if coords is None else np.asarray(coords, dtype=np.int64)
    numeric = np.empty(len(idx))
    flat = x.ravel()
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x)).item()
        flat[i] = orig - h
        fm = f(Tensor(x)).item()
        flat[i] = orig
        numeric[k] = (fp - fm) / (2.0 * h)

    errors = relative_error(analytic[idx], numeric)
    failing = [int(i) for i, e in zip(idx, errors) if not e <= tol]
    return GradCheckReport(
        max_error=float(errors.max()) if errors.size else 0.0,
        errors=errors,
        analytic=analytic[idx],
        numeric=numeric,
        tol=tol,
        failing=failing,
    )


def grad_check_params(loss_fn: Callable[[dict], Tensor], params: dict, h: float = 1e-5,
                      tol: float = 1e-3, max_coords: Optional[int] = None,
                      seed: int = 0) -> dict:
    """Run :func:`grad_check` on every array of a named parameter mapping.

    ``loss_fn`` receives a mapping name -> Tensor. Returns name -> report.
    """
    rng = np.random.default_rng(seed)
    reports = {}
    for name in sorted(params):
        base = params[name]

        def f(t, name=name):
            bound = {k: (t if k == name else Tensor(v)) for k, v in params.items()}
            return loss_fn(bound)

        coords = None
        if max_coords is not None and base.size > max_coords:
            coords = np.sort(rng.choice(base.size, size=max_coords, replace=False))
        reports[name] = grad_check(f, base, h=h, tol=tol, coords=coords)
    return reports
