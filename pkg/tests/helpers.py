"""Shared test utilities: finite-difference checking and tiny model configs."""

from __future__ import annotations

import numpy as np

from minigen import numcore as nc
from minigen.model import ModelConfig

FD_STEP = 1e-4
FD_TOL = 1e-4


def numeric_grad(fn, t: nc.Tensor, eps: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to every entry of ``t``."""
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    g = out.reshape(-1)
    with nc.no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = float(fn().data)
            flat[i] = old - eps
            lo = float(fn().data)
            flat[i] = old
            g[i] = (hi - lo) / (2 * eps)
    return out


# denominator floor: a gradient that vanishes identically (a key bias shifts every
# score in a row equally) comes out as ~1e-19 against an exact 0, which is agreement
REL_FLOOR = 1e-12


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, with the denominator floored at REL_FLOOR."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), REL_FLOOR)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn, params: dict[str, nc.Tensor], eps: float = FD_STEP) -> dict[str, float]:
    """Relative error between analytic and numeric gradients, per named tensor."""
    for t in params.values():
        assert t.dtype == np.float64, "gradient checks run in 64-bit mode"
        t.zero_grad()
    nc.backward(fn())
    analytic = {k: t.grad.copy() for k, t in params.items()}
    return {k: rel_error(analytic[k], numeric_grad(fn, t, eps)) for k, t in params.items()}


def tiny_config(**overrides) -> ModelConfig:
    base = dict(num_layers=2, d_model=8, num_heads=2, d_ff=16, context_length=12, vocab_size=11)
    base.update(overrides)
    return ModelConfig(**base)
