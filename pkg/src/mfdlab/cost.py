"""Running costs and the tanh-saturated control map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mfd import DomainError


@dataclass(frozen=True)
class ControlBounds:
    """Componentwise box u_min <= u <= u_max, stored in the raw control frame."""

    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.u_min, dtype=float))
        hi = np.atleast_1d(np.asarray(self.u_max, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("u_min and u_max differ in length")
        if np.any(lo < 0) or np.any(hi > 1) or np.any(lo >= hi):
            raise ValueError("bounds must satisfy 0 <= u_min < u_max <= 1")
        object.__setattr__(self, "u_min", lo)
        object.__setattr__(self, "u_max", hi)

    @property
    def v_bar(self) -> np.ndarray:
        return 0.5 * (self.u_max + self.u_min)

    @property
    def v_under(self) -> np.ndarray:
        return 0.5 * (self.u_max - self.u_min)

    def shifted(self, offset) -> "FrameBounds":
        """The same box expressed in a frame shifted by ``offset`` (e.g. u*)."""
        off = np.asarray(offset, dtype=float)
        return FrameBounds(self.u_min - off, self.u_max - off)

    def contains(self, u, strict: bool = True) -> bool:
        u = np.asarray(u, dtype=float)
        if strict:
            return bool(np.all(u > self.u_min) and np.all(u < self.u_max))
        return bool(np.all(u >= self.u_min) and np.all(u <= self.u_max))

    @classmethod
    def centered(cls, center, half_width) -> "ControlBounds":
        """Box of the given half width around ``center``, cut to [0, 1]."""
        c = np.asarray(center, dtype=float)
        w = np.broadcast_to(np.asarray(half_width, dtype=float), c.shape)
        return cls(np.clip(c - w, 0.0, 1.0), np.clip(c + w, 0.0, 1.0))


@dataclass(frozen=True)
class FrameBounds:
    """Bounds in an arbitrary (possibly error) frame; may be negative."""

    u_min: np.ndarray
    u_max: np.ndarray

    v_bar = ControlBounds.v_bar
    v_under = ControlBounds.v_under
    contains = ControlBounds.contains


@dataclass(frozen=True)
class CostWeights:
    Q: np.ndarray
    R: np.ndarray
    lambda_bar: float = 1.0

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.asarray(self.R, dtype=float)
        if R.ndim == 2:
            if np.any(R != np.diag(np.diag(R))):
                raise ValueError("R must be diagonal")
            R = np.diag(R)
        if not np.allclose(Q, Q.T) or np.any(np.linalg.eigvalsh(Q) <= 0):
            raise ValueError("Q must be symmetric positive definite")
        if np.any(R <= 0):
            raise ValueError("R must have positive diagonal")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @property
    def gamma(self) -> np.ndarray:
        return self.R


def _gamma(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    return np.diag(R) if R.ndim == 2 else R


def state_cost(Q, n_err) -> float:
    """Quadratic tracking cost n~^T Q n~."""
    x = np.asarray(n_err, dtype=float)
    return float(x @ np.asarray(Q, dtype=float) @ x)


def penalty_coordinate(bounds, u) -> np.ndarray:
    """Normalised position (u - v_bar) / v_under, in (-1, 1) inside the box."""
    return (np.asarray(u, dtype=float) - bounds.v_bar) / bounds.v_under


def input_penalty(bounds, R, u) -> float:
    """Non-quadratic barrier 2 v^T R int_{v_bar}^{u} atanh((s - v_bar)/v) ds.

    Evaluated through its closed form
    sum_k 2 v_k^2 gamma_k (x_k atanh x_k + ln(1 - x_k^2) / 2).
    """
    x = penalty_coordinate(bounds, u)
    if np.any(np.abs(x) >= 1.0):
        raise DomainError("control on or outside its bounds; penalty diverges")
    v = bounds.v_under
    terms = x * np.arctanh(x) + 0.5 * np.log1p(-x * x)
    return float(np.sum(2.0 * v * v * _gamma(R) * terms))


def log_cosh(D) -> np.ndarray:
    a = np.abs(np.asarray(D, dtype=float))
    return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)


def drive_penalty(bounds, R, D) -> np.ndarray:
    """Penalty of the control saturate(bounds, D), computed from D directly.

    With x = -tanh(D) the closed form becomes D tanh(D) - log cosh(D), which
    stays finite even where tanh(D) rounds to +-1. Works on (..., alpha_u)
    batches and returns one value per leading index.
    """
    D = np.asarray(D, dtype=float)
    v = bounds.v_under
    terms = D * np.tanh(D) - log_cosh(D)
    return np.sum(2.0 * v * v * _gamma(R) * terms, axis=-1)


def saturate(bounds, D) -> np.ndarray:
    """Map an unconstrained input D into the open box: -v tanh(D) + v_bar."""
    return -bounds.v_under * np.tanh(np.asarray(D, dtype=float)) + bounds.v_bar


def utility(Q, R, bounds, n_err, u_err) -> float:
    return state_cost(Q, n_err) + input_penalty(bounds, R, u_err)


def tts_integrand(n, u, lambda_bar: float) -> float:
    """Total accumulation plus lambda_bar * ||u||_2 (veh)."""
    n = np.asarray(n, dtype=float)
    return float(np.sum(n) + lambda_bar * np.linalg.norm(np.asarray(u, dtype=float)))
