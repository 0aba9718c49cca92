"""Causal time gate: a monotone window over normalized time.

The gate value h(t) weights perturbed-point features during pooling and,
optionally, per-point residual terms.  Its shift parameter is advanced by the
training loop from the measured gradient correlation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

VARIANTS = ("tanh", "relu-tanh")


@dataclass(frozen=True)
class GateState:
    """Gate parameters; ``gamma`` is the only part that evolves."""

    alpha: float = 5.0
    gamma: float = -0.5
    eta: float = 1e-3
    eps_tol: float = 1.0
    delta_max: float = 0.1
    variant: str = "tanh"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown gate variant {self.variant!r}")


def gate_h(t, T: float, g: GateState):
    """Gate value at time t (arrays allowed), normalized by the final time."""
    s = g.alpha * (np.asarray(t, dtype=np.float64) / T - g.gamma)
    if g.variant == "tanh":
        return (1.0 - np.tanh(s)) / 2.0
    return np.maximum(0.0, -np.tanh(s))


def gate_jet(t, T: float, g: GateState, dt_mask=None) -> dict:
    """Gate as a jet in t: {v, d:t, dd:t}; ``dt_mask`` handles clipped times."""
    t = np.asarray(t, dtype=np.float64)
    a = g.alpha / T
    s = g.alpha * (t / T - g.gamma)
    th = np.tanh(s)
    sech2 = 1.0 - th * th
    if g.variant == "tanh":
        v = (1.0 - th) / 2.0
        d = -0.5 * a * sech2
        dd = a * a * th * sech2
    else:
        active = (-th > 0.0).astype(np.float64)
        v = np.maximum(0.0, -th)
        d = -a * sech2 * active
        dd = 2.0 * a * a * th * sech2 * active
    if dt_mask is not None:
        d = d * dt_mask
        dd = dd * dt_mask
    return {"v": v, "d:t": d, "dd:t": dd}


def open_window_end(T: float, g: GateState, min_gate: float) -> float:
    """Largest t with h(t) >= min_gate; <= 0 means the window is empty."""
    if not 0.0 < min_gate < 1.0:
        raise ValueError("min_gate must lie in (0, 1)")
    if g.variant == "tanh":
        # (1 - tanh s)/2 >= m  <=>  s <= atanh(1 - 2m)
        s_max = np.arctanh(1.0 - 2.0 * min_gate)
    else:
        # -tanh s >= m  <=>  s <= -atanh(m)
        s_max = -np.arctanh(min_gate)
    t_norm = g.gamma + s_max / g.alpha
    return float(min(T, t_norm * T))


def gamma_update(g: GateState, corr: float) -> GateState:
    """Advance the shift from a nonnegative correlation value (clipped step)."""
    if corr < 0.0:
        raise ValueError("correlation must be nonnegative")
    step = g.eta * min(np.exp(-g.eps_tol * corr), g.delta_max)
    return replace(g, gamma=g.gamma + step)
