"""Optimizer steppers and stepsize schedules.

Steppers are pure functions of (state, parameter, gradient, stepsize); state
objects own their buffers and are mutated in place, one per run.  The Muon
family moves along the semi-orthogonal factor of a (momentum-averaged)
gradient; the baselines (GD, GD+Nesterov, Adam, AdamW) use the standard
flattened update rules.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import matcore


def _check_shapes(W: np.ndarray, G: np.ndarray) -> None:
    if W.shape != G.shape:
        raise ValueError(f"gradient shape {G.shape} does not match parameter shape {W.shape}")


def orthogonalize(M: np.ndarray, method: str = "svd", ns_steps: int = 5) -> np.ndarray:
    """Semi-orthogonal update direction for a momentum/gradient matrix.

    The zero matrix yields the zero direction (no movement) regardless of
    method, since the Newton-Schulz route is undefined there.
    """
    if not np.any(M):
        return np.zeros_like(M)
    if method == "svd":
        return matcore.orthogonalize_svd(M)
    if method == "ns":
        return matcore.orthogonalize_ns(M, steps=ns_steps)
    raise ValueError(f"unknown orthogonalizer {method!r}")


@dataclass
class MuonState:
    """Momentum buffer and counter for the Muon stepper.

    M is unset before the first step; the first step copies the gradient into
    it exactly.  beta stays constant over a run.
    """

    beta: float = 0.9
    orthogonalizer: str = "svd"
    ns_steps: int = 5
    t: int = 0
    M: Optional[np.ndarray] = None
    last_direction: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")


def muon_step(state: MuonState, W, G, eta: float) -> np.ndarray:
    """One Muon update: momentum average, orthogonalize, move.

    M_t = beta*M_{t-1} + (1-beta)*G_t (with M_0 = G_0), then
    W' = W - eta * orthogonalize(M_t).
    """
    W = matcore.as_matrix(W)
    G = matcore.as_matrix(G)
    _check_shapes(W, G)
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if state.t == 0 or state.M is None:
        state.M = G.copy()
    else:
        state.M = state.beta * state.M + (1.0 - state.beta) * G
    O = orthogonalize(state.M, state.orthogonalizer, state.ns_steps)
    state.last_direction = O
    state.t += 1
    return W - eta * O


def simplified_muon_step(W, G, eta: float, orthogonalizer: str = "svd",
                         ns_steps: int = 5) -> np.ndarray:
    """Momentum-free Muon: W' = W - eta * orthogonalize(G)."""
    W = matcore.as_matrix(W)
    G = matcore.as_matrix(G)
    _check_shapes(W, G)
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    return W - eta * orthogonalize(G, orthogonalizer, ns_steps)


def gd_step(W, G, eta: float) -> np.ndarray:
    """Plain gradient descent."""
    W = matcore.as_matrix(W)
    G = matcore.as_matrix(G)
    _check_shapes(W, G)
    return W - eta * G


@dataclass
class NesterovState:
    v: Optional[np.ndarray] = None


def gd_nesterov_step(state: NesterovState, W, G, eta: float, mu: float = 0.9) -> np.ndarray:
    """Gradient descent with Nesterov momentum (velocity form)."""
    W = matcore.as_matrix(W)
    G = matcore.as_matrix(G)
    _check_shapes(W, G)
    state.v = G.copy() if state.v is None else mu * state.v + G
    return W - eta * (G + mu * state.v)


@dataclass
class AdamState:
    t: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


def adam_step(state: AdamState, W, G, eta: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """Adam with bias correction."""
    W = matcore.as_matrix(W)
    G = matcore.as_matrix(G)
    _check_shapes(W, G)
    if state.m is None:
        state.m = np.zeros_like(G)
        state.v = np.zeros_like(G)
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * G
    state.v = beta2 * state.v + (1.0 - beta2) * (G * G)
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return W - eta * m_hat / (np.sqrt(v_hat) + eps)


def adamw_step(state: AdamState, W, G, eta: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.01) -> np.ndarray:
    """Adam with decoupled weight decay."""
    W = matcore.as_matrix(W)
    W_new = adam_step(state, W, G, eta, beta1, beta2, eps)
    return W_new - eta * weight_decay * W


# ---------------------------------------------------------------------------
# Stepsize schedules
# ---------------------------------------------------------------------------

CONSTANT = "constant"
NONCONVEX_L = "nonconvex_L"
NONCONVEX_LSTAR = "nonconvex_Lstar"
ADAPTIVE_RL = "adaptive_rL"
ADAPTIVE_LSTAR = "adaptive_Lstar"
THEORY_J = "theory_J"

_ADAPTIVE_KINDS = (ADAPTIVE_RL, ADAPTIVE_LSTAR)


@dataclass(frozen=True)
class Schedule:
    """Stepsize rule: a fixed value, a horizon formula, or an adaptive quotient."""

    kind: str
    params: dict = field(default_factory=dict)


def _require_positive(params: dict, names: tuple) -> None:
    for name in names:
        if name not in params:
            raise ValueError(f"schedule is missing required constant {name!r}")
        if params[name] <= 0:
            raise ValueError(f"schedule constant {name!r} must be positive, got {params[name]}")


def constant_schedule(eta: float) -> Schedule:
    if eta <= 0:
        raise ValueError("eta must be positive")
    return Schedule(CONSTANT, {"eta": float(eta)})


def nonconvex_L_schedule(delta: float, r: int, T: int, L: float, beta: float = 0.0) -> Schedule:
    """Constant stepsize sqrt((1-beta)*delta / (r*T*L))."""
    p = {"delta": delta, "r": r, "T": T, "L": L, "beta": beta}
    _require_positive(p, ("delta", "r", "T", "L"))
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    return Schedule(NONCONVEX_L, p)


def nonconvex_Lstar_schedule(delta: float, T: int, L_star: float, beta: float = 0.0) -> Schedule:
    """Constant stepsize sqrt((1-beta)*delta / (T*L_star))."""
    p = {"delta": delta, "T": T, "L_star": L_star, "beta": beta}
    _require_positive(p, ("delta", "T", "L_star"))
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    return Schedule(NONCONVEX_LSTAR, p)


def adaptive_rL_schedule(r: int, L: float) -> Schedule:
    """Adaptive stepsize: nuclear gradient norm divided by r*L."""
    p = {"r": r, "L": L}
    _require_positive(p, ("r", "L"))
    return Schedule(ADAPTIVE_RL, p)


def adaptive_Lstar_schedule(L_star: float) -> Schedule:
    """Adaptive stepsize: nuclear gradient norm divided by L_star."""
    p = {"L_star": L_star}
    _require_positive(p, ("L_star",))
    return Schedule(ADAPTIVE_LSTAR, p)


def theory_J_schedule(delta: float, J: float, T: int) -> Schedule:
    """Constant stepsize sqrt(2*delta / (J*T)) for positive average curvature J."""
    p = {"delta": delta, "J": J, "T": T}
    _require_positive(p, ("delta", "J", "T"))
    return Schedule(THEORY_J, p)


def next_eta(schedule: Schedule, t: int = 0, grad_nuc: Optional[float] = None) -> float:
    """Stepsize for step t.  Adaptive kinds require the current nuclear
    gradient norm and return exactly 0 when the gradient vanishes."""
    p = schedule.params
    if schedule.kind == CONSTANT:
        return p["eta"]
    if schedule.kind == NONCONVEX_L:
        return float(np.sqrt((1.0 - p["beta"]) * p["delta"] / (p["r"] * p["T"] * p["L"])))
    if schedule.kind == NONCONVEX_LSTAR:
        return float(np.sqrt((1.0 - p["beta"]) * p["delta"] / (p["T"] * p["L_star"])))
    if schedule.kind == THEORY_J:
        return float(np.sqrt(2.0 * p["delta"] / (p["J"] * p["T"])))
    if schedule.kind in _ADAPTIVE_KINDS:
        if grad_nuc is None:
            raise ValueError("adaptive schedules need the nuclear gradient norm")
        if grad_nuc < 0:
            raise ValueError("gradient norm must be nonnegative")
        denom = p["r"] * p["L"] if schedule.kind == ADAPTIVE_RL else p["L_star"]
        return float(grad_nuc / denom)
    raise ValueError(f"unknown schedule kind {schedule.kind!r}")


def theory_beta(delta: float, sigma: float, T: int, L: Optional[float] = None,
                L_star: Optional[float] = None, r: Optional[int] = None,
                default_beta: float = 0.9) -> float:
    """Momentum coefficient from the horizon formula.

    With the Frobenius constant L: 1-beta = min(sqrt(L*delta)/(sigma*sqrt(T)), 1).
    With the spectral constant L_star (r required):
    1-beta = min(sqrt(L_star*delta)/(sigma*sqrt(r*T)), 1).
    The noiseless case sigma=0 leaves beta unconstrained up to O(1); we return
    default_beta there.
    """
    if delta <= 0 or T <= 0:
        raise ValueError("delta and T must be positive")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0.0:
        return default_beta
    if L is not None:
        one_minus = min(np.sqrt(L * delta) / (sigma * np.sqrt(T)), 1.0)
    elif L_star is not None:
        if r is None:
            raise ValueError("the L_star rule needs r")
        one_minus = min(np.sqrt(L_star * delta) / (sigma * np.sqrt(r * T)), 1.0)
    else:
        raise ValueError("provide either L or L_star")
    return float(1.0 - one_minus)
