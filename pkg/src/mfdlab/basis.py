"""Polynomial activation functions for the critic and the linear actor."""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BasisSpec:
    """Critic monomial exponents plus the identity actor features.

    ``input_scale`` divides raw inputs before any evaluation so that
    high-degree monomials of vehicle counts stay well conditioned.
    """

    input_dim: int
    exponents: np.ndarray  # (K_V, input_dim) integer multi-indices
    input_scale: float = 1.0

    def __post_init__(self):
        E = np.asarray(self.exponents, dtype=int).reshape(-1, self.input_dim)
        if len({tuple(r) for r in E}) != len(E):
            raise ValueError("critic multi-indices must be distinct")
        E.setflags(write=False)
        object.__setattr__(self, "exponents", E)
        if self.input_scale <= 0:
            raise ValueError("input_scale must be positive")

    @property
    def K_V(self) -> int:
        return self.exponents.shape[0]

    @property
    def K_D(self) -> int:
        return self.input_dim

    @property
    def max_degree(self) -> int:
        return int(self.exponents.sum(axis=1).max())

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "input_scale": self.input_scale,
                "exponents": self.exponents.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        return cls(int(d["input_dim"]), np.array(d["exponents"], dtype=int),
                   float(d.get("input_scale", 1.0)))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def multi_indices(dim: int, degree: int) -> list[tuple[int, ...]]:
    """All exponent tuples of the given total degree, lexicographically descending."""
    if dim == 1:
        return [(degree,)]
    out = []
    for first in range(degree, -1, -1):
        out.extend((first,) + rest for rest in multi_indices(dim - 1, degree - first))
    return out


def gen_critic_basis(input_dim: int, degree: int, input_scale: float = 1.0,
                     max_vars: int | None = None, min_degree: int | None = None) -> BasisSpec:
    """Monomials of total degree ``degree`` in ``input_dim`` variables.

    ``min_degree`` additionally includes every degree from min_degree up;
    ``max_vars`` drops monomials that involve more than that many distinct
    variables.
    """
    if degree < 1:
        raise ValueError("degree must be at least 1")
    lo = degree if min_degree is None else min_degree
    rows = []
    for d in range(degree, lo - 1, -1):
        rows.extend(multi_indices(input_dim, d))
    if max_vars is not None:
        rows = [r for r in rows if sum(e > 0 for e in r) <= max_vars]
    return BasisSpec(input_dim, np.array(rows, dtype=int), input_scale)


def scale_inputs(x, n_scale: float) -> np.ndarray:
    if n_scale <= 0:
        raise ValueError("n_scale must be positive")
    return np.asarray(x, dtype=float) / n_scale


def unscale_inputs(x, n_scale: float) -> np.ndarray:
    return np.asarray(x, dtype=float) * n_scale


def _powers(spec: BasisSpec, x: np.ndarray) -> np.ndarray:
    # table[..., j, e] = x_j ** e
    deg = spec.max_degree
    return x[..., :, None] ** np.arange(deg + 1)


def eval_critic(spec: BasisSpec, x) -> np.ndarray:
    """phi_V at (already scaled) x; accepts a single point or a (N, dim) batch."""
    x = np.asarray(x, dtype=float)
    P = _powers(spec, x)
    cols = np.arange(spec.input_dim)
    vals = P[..., cols, spec.exponents]  # (..., K_V, dim)
    return vals.prod(axis=-1)


def eval_critic_grad(spec: BasisSpec, x) -> np.ndarray:
    """d phi_V / d x, shape (K_V, dim) (or (N, K_V, dim) for a batch)."""
    x = np.asarray(x, dtype=float)
    P = _powers(spec, x)
    E = spec.exponents
    cols = np.arange(spec.input_dim)
    vals = P[..., cols, E]  # (..., K_V, dim)
    lowered = P[..., cols, np.maximum(E - 1, 0)] * E
    out = np.empty(vals.shape)
    for j in range(spec.input_dim):
        others = np.delete(vals, j, axis=-1).prod(axis=-1)
        out[..., j] = lowered[..., j] * others
    return out


def eval_actor(spec: BasisSpec, x) -> np.ndarray:
    """phi_D(x) = x: the actor is linear in the (scaled) coordinates."""
    return np.array(x, dtype=float)


def monomial_count(dim: int, degree: int) -> int:
    return len(list(itertools.combinations_with_replacement(range(dim), degree)))
