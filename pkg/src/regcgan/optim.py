"""Adam over named parameter stores."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr: float, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        for name in params:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        return state

    def to_records(self, prefix: str) -> dict:
        out = {}
        for name in sorted(self.m):
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}

    @classmethod
    def from_records(cls, hyper: dict, records: dict, prefix: str) -> "AdamState":
        state = cls(**hyper)
        mp, vp = f"{prefix}.m.", f"{prefix}.v."
        for key, value in records.items():
            if key.startswith(mp):
                state.m[key[len(mp):]] = np.array(value)
            elif key.startswith(vp):
                state.v[key[len(vp):]] = np.array(value)
        return state


def adam_step(state: AdamState, params, grads: dict) -> None:
    """One bias-corrected Adam update, in place.

    Parameters missing from ``grads`` are left untouched (their moments do
    not decay either). Nothing is modified if any gradient is non-finite.
    """
    unknown = sorted(set(grads) - set(params))
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {unknown}")
    for name in sorted(grads):
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r}; step aborted")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in sorted(grads):
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p = params[name]  # mutate in place: stores may share arrays
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
