"""Multi-region MFD dynamics.

OD-resolved conservation equations for an L-region network whose regions
each admit a cubic production function G(n). The state vector n stacks the
accumulations n_ij (vehicles in region i heading to region j) in
``RegionNetwork.od_pairs`` order; the control vector u stacks the
transfer ratios u_ij in ``RegionNetwork.control_pairs`` order.

Regions are 0-indexed internally and 1-indexed in labels.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DemandFn = Callable[[float], np.ndarray]


class DomainError(ValueError):
    """Argument outside the domain where a quantity is defined."""


class ConfigurationError(ValueError):
    """Parameters that cannot describe a valid model."""


class InfeasibleSteadyState(ValueError):
    """No steady state with controls inside their bounds."""


@dataclass(frozen=True)
class MfdParams:
    """Cubic production function G(n) = a n^3 + b n^2 + c n, in veh/s."""

    coeff_cubic: float
    coeff_quad: float
    coeff_lin: float
    n_jam: float

    @property
    def n_cr(self) -> float:
        return critical_accumulation(self)

    @classmethod
    def reference(cls) -> "MfdParams":
        # veh/h coefficients divided by 3600
        return cls(1.4877e-7 / 3600.0, -2.9815e-3 / 3600.0, 15.0912 / 3600.0, 10000.0)

    def to_dict(self) -> dict:
        return {
            "coeff_cubic": self.coeff_cubic,
            "coeff_quad": self.coeff_quad,
            "coeff_lin": self.coeff_lin,
            "n_jam": self.n_jam,
        }


def _production(params: MfdParams, n):
    return ((params.coeff_cubic * n + params.coeff_quad) * n + params.coeff_lin) * n


def mfd_flow(params: MfdParams, n_i):
    """Trip completion rate G(n_i) in veh/s.

    Raises DomainError outside [0, n_jam]; nothing is clamped.
    """
    arr = np.asarray(n_i, dtype=float)
    if np.any(arr < 0) or np.any(arr > params.n_jam):
        raise DomainError(f"accumulation outside [0, {params.n_jam}]: {n_i}")
    out = _production(params, arr)
    return float(out) if out.ndim == 0 else out


def critical_accumulation(params: MfdParams) -> float:
    """Interior maximiser of G on (0, n_jam), from the roots of G'."""
    a, b, c = params.coeff_cubic, params.coeff_quad, params.coeff_lin
    # G'(n) = 3a n^2 + 2b n + c
    if a == 0.0:
        roots = [] if b == 0.0 else [-c / (2.0 * b)]
    else:
        disc = (2.0 * b) ** 2 - 12.0 * a * c
        if disc < 0:
            raise ConfigurationError("G' has no real root; G is monotone")
        sq = np.sqrt(disc)
        roots = [(-2.0 * b - sq) / (6.0 * a), (-2.0 * b + sq) / (6.0 * a)]
    for r in sorted(roots):
        # maximiser: G'' = 6a n + 2b < 0
        if 0.0 < r < params.n_jam and 6.0 * a * r + 2.0 * b < 0.0:
            if _production(params, r) < _production(params, params.n_jam):
                raise ConfigurationError("G rises again above its local peak before n_jam")
            return float(r)
    raise ConfigurationError("G has no interior maximum on (0, n_jam)")


@dataclass(frozen=True)
class RegionNetwork:
    """Region adjacency plus the state/control vector layouts."""

    region_count: int
    reachable: tuple[tuple[int, ...], ...]
    od_pairs: tuple[tuple[int, int], ...] = field(init=False)
    control_pairs: tuple[tuple[int, int], ...] = field(init=False)

    def __post_init__(self):
        if len(self.reachable) != self.region_count:
            raise ConfigurationError("one reachable set per region required")
        reach = tuple(tuple(sorted(set(z))) for z in self.reachable)
        for i, z in enumerate(reach):
            if i in z or any(not 0 <= j < self.region_count for j in z):
                raise ConfigurationError(f"bad reachable set for region {i + 1}: {z}")
        object.__setattr__(self, "reachable", reach)
        od = sorted([(i, i) for i in range(self.region_count)]
                    + [(i, j) for i in range(self.region_count) for j in reach[i]])
        ctrl = sorted((i, j) for i in range(self.region_count) for j in reach[i])
        object.__setattr__(self, "od_pairs", tuple(od))
        object.__setattr__(self, "control_pairs", tuple(ctrl))

    @classmethod
    def two_region(cls) -> "RegionNetwork":
        return cls(2, ((1,), (0,)))

    @classmethod
    def corridor(cls, L: int = 3) -> "RegionNetwork":
        """Linear chain 1-2-...-L; only neighbours exchange traffic."""
        reach = tuple(tuple(j for j in (i - 1, i + 1) if 0 <= j < L) for i in range(L))
        return cls(L, reach)

    @property
    def alpha_n(self) -> int:
        return len(self.od_pairs)

    @property
    def alpha_u(self) -> int:
        return len(self.control_pairs)

    @property
    def od_labels(self) -> list[str]:
        return [f"{i + 1}{j + 1}" for i, j in self.od_pairs]

    @property
    def control_labels(self) -> list[str]:
        return [f"{i + 1}{j + 1}" for i, j in self.control_pairs]

    def od_index(self, i: int, j: int) -> int:
        return self.od_pairs.index((i, j))

    # cached index arrays used by the vectorised right-hand side
    @property
    def _idx(self) -> "_Layout":
        lay = self.__dict__.get("_layout")
        if lay is None:
            lay = _Layout(self)
            object.__setattr__(self, "_layout", lay)
        return lay

    def regional(self, n) -> np.ndarray:
        """Regional totals n_i = sum_j n_ij."""
        return self._idx.membership @ np.asarray(n, dtype=float)

    def to_dict(self) -> dict:
        return {"region_count": self.region_count,
                "reachable": [[j + 1 for j in z] for z in self.reachable]}


class _Layout:
    def __init__(self, net: RegionNetwork):
        od = net.od_pairs
        self.origin = np.array([i for i, _ in od])
        self.internal = np.array([i == j for i, j in od])
        self.membership = np.zeros((net.region_count, len(od)))
        self.membership[self.origin, np.arange(len(od))] = 1.0
        self.src = np.array([od.index(p) for p in net.control_pairs])
        self.dst = np.array([od.index((j, j)) for _, j in net.control_pairs])
        # row c moves one unit of transfer flow from src[c] to dst[c]
        self.transfer = np.zeros((len(net.control_pairs), len(od)))
        self.transfer[np.arange(len(self.src)), self.src] -= 1.0
        self.transfer[np.arange(len(self.dst)), self.dst] += 1.0


def _per_region(net: RegionNetwork, params) -> list[MfdParams]:
    if isinstance(params, MfdParams):
        return [params] * net.region_count
    params = list(params)
    if len(params) != net.region_count:
        raise ConfigurationError("one MfdParams per region required")
    return params


@dataclass(frozen=True)
class AccumulationState:
    n: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "n", np.asarray(self.n, dtype=float))


@dataclass(frozen=True)
class SteadyState:
    n_star: np.ndarray
    u_star: np.ndarray
    n_bar: np.ndarray
    q_star: np.ndarray


def validate_state(net: RegionNetwork, params, n) -> None:
    n = np.asarray(n, dtype=float)
    if n.shape != (net.alpha_n,):
        raise ValueError(f"state has shape {n.shape}, expected ({net.alpha_n},)")
    if np.any(n < 0):
        raise DomainError("negative accumulation")
    jam = np.array([p.n_jam for p in _per_region(net, params)])
    if np.any(net.regional(n) > jam * (1 + 1e-12)):
        raise DomainError("regional accumulation above n_jam")


def _flows(net: RegionNetwork, params, n: np.ndarray):
    # works on a single state or a (..., alpha_n) batch
    lay = net._idx
    prm = _per_region(net, params)
    n_reg = n @ lay.membership.T
    a = np.array([p.coeff_cubic for p in prm])
    b = np.array([p.coeff_quad for p in prm])
    c = np.array([p.coeff_lin for p in prm])
    G = ((a * n_reg + b) * n_reg + c) * n_reg
    sender = n_reg[..., lay.origin]
    # an empty region sends nothing anywhere
    with np.errstate(invalid="ignore", divide="ignore"):
        share = np.where(sender > 0, n / sender, 0.0)
    return share * G[..., lay.origin], n_reg, G


def transfer_flows(net: RegionNetwork, params, state) -> tuple[np.ndarray, np.ndarray]:
    """Return (M_ii per region, M_ij per OD pair) in veh/s.

    M_ij = (n_ij / n_i) G_i(n_i); the second array is indexed like the state
    so it also carries the internal M_ii entries.
    """
    n = state.n if isinstance(state, AccumulationState) else np.asarray(state, dtype=float)
    validate_state(net, params, n)
    M, _, _ = _flows(net, params, n)
    lay = net._idx
    return M[lay.internal], M


def _rhs(net: RegionNetwork, params, n, u, q) -> np.ndarray:
    lay = net._idx
    M, _, _ = _flows(net, params, n)
    moved = M[..., lay.src] * u
    return q - np.where(lay.internal, M, 0.0) + moved @ lay.transfer


def state_derivative(net: RegionNetwork, params, state, u, q) -> np.ndarray:
    """dn/dt of the OD-resolved conservation equations (veh/s)."""
    n = state.n if isinstance(state, AccumulationState) else np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    q = np.asarray(q, dtype=float)
    if u.shape != (net.alpha_u,) or q.shape != (net.alpha_n,) or n.shape != (net.alpha_n,):
        raise ValueError("dimension mismatch between network layout and state/control/demand")
    return _rhs(net, params, n, u, q)


def affine_decompose(net: RegionNetwork, params, state, steady: SteadyState):
    """Error-coordinate drift F and input matrix S with d(n~)/dt = F + S u~.

    F is the right-hand side at u = u*, q = q*; column c of S carries -M_ij at
    the source entry n_ij and +M_ij at the destination entry n_jj. A
    (N, alpha_n) batch of states gives F of shape (N, alpha_n) and S of
    shape (N, alpha_n, alpha_u).
    """
    n = state.n if isinstance(state, AccumulationState) else np.asarray(state, dtype=float)
    F = _rhs(net, params, n, steady.u_star, steady.q_star)
    return F, input_matrix(net, params, n)


def input_matrix(net: RegionNetwork, params, n) -> np.ndarray:
    lay = net._idx
    M, _, _ = _flows(net, params, np.asarray(n, dtype=float))
    # S[..., k, c] = M_src(c) * transfer[c, k]
    return M[..., None, lay.src] * lay.transfer.T


def to_error_coords(state, steady: SteadyState) -> np.ndarray:
    n = state.n if isinstance(state, AccumulationState) else np.asarray(state, dtype=float)
    return n - steady.n_star


def from_error_coords(n_err, steady: SteadyState, t: float = 0.0) -> AccumulationState:
    return AccumulationState(np.asarray(n_err, dtype=float) + steady.n_star, t)


def control_to_error(u, steady: SteadyState) -> np.ndarray:
    return np.asarray(u, dtype=float) - steady.u_star


def control_from_error(u_err, steady: SteadyState) -> np.ndarray:
    return np.asarray(u_err, dtype=float) + steady.u_star


def solve_steady_state(net: RegionNetwork, params, n_bar, q_star, u_min=None, u_max=None,
                       tol: float = 1e-9, max_iter: int = 100) -> SteadyState:
    """Steady OD split n* and controls u* holding regional totals at n_bar.

    The regional constraint eliminates n*_ii; the remaining OD entries and
    the controls are found by damped Gauss-Newton (minimum-norm steps, so
    under-determined topologies get the solution nearest the start point),
    falling back to bounded least squares when Newton leaves the bounds.
    """
    prm = _per_region(net, params)
    n_bar = np.asarray(n_bar, dtype=float)
    q_star = np.asarray(q_star, dtype=float)
    if n_bar.shape != (net.region_count,) or q_star.shape != (net.alpha_n,):
        raise ValueError("n_bar must have one entry per region and q_star one per OD pair")
    for i, (p, nb) in enumerate(zip(prm, n_bar)):
        if not 0.0 < nb < p.n_jam:
            raise DomainError(f"set-point of region {i + 1} outside (0, n_jam)")
    lo = np.zeros(net.alpha_u) if u_min is None else np.asarray(u_min, dtype=float)
    hi = np.ones(net.alpha_u) if u_max is None else np.asarray(u_max, dtype=float)

    lay = net._idx
    free = np.flatnonzero(~lay.internal)
    k = free.size

    def unpack(z):
        n = np.zeros(net.alpha_n)
        n[free] = z[:k]
        n[lay.internal] = n_bar - lay.membership[:, free] @ z[:k]
        return n, z[k:]

    def residual(z):
        n, u = unpack(z)
        return _rhs(net, prm, n, u, q_star)

    def jac(z):
        J = np.empty((net.alpha_n, z.size))
        for c in range(z.size):
            h = 1e-6 * max(1.0, abs(z[c]))
            zp, zm = z.copy(), z.copy()
            zp[c] += h
            zm[c] -= h
            J[:, c] = (residual(zp) - residual(zm)) / (2 * h)
        return J

    # start: split each region's target by its outgoing demand shares
    z0 = np.empty(k + net.alpha_u)
    for c, idx in enumerate(free):
        i = lay.origin[idx]
        own = [m for m in range(net.alpha_n) if lay.origin[m] == i]
        qs = q_star[own].sum()
        z0[c] = n_bar[i] * (q_star[idx] / qs if qs > 0 else 1.0 / len(own))
    z0[k:] = 0.5 * (lo + hi)

    z = z0.copy()
    r = residual(z)
    for _ in range(max_iter):
        if np.max(np.abs(r)) < tol:
            break
        step = np.linalg.lstsq(jac(z), -r, rcond=None)[0]
        alpha, nr = 1.0, np.linalg.norm(r)
        while alpha > 1e-6:
            cand = z + alpha * step
            rc = residual(cand)
            if np.linalg.norm(rc) < nr:
                break
            alpha *= 0.5
        z, r = cand, rc

    n, u = unpack(z)
    inside = np.all(n >= 0) and np.all(u >= lo - 1e-12) and np.all(u <= hi + 1e-12)
    if np.max(np.abs(r)) >= 1e-6 or not inside:
        from scipy.optimize import least_squares

        lb = np.concatenate([np.zeros(k), lo])
        ub = np.concatenate([n_bar[lay.origin[free]], hi])
        sol = least_squares(residual, np.clip(z0, lb, ub), bounds=(lb, ub),
                            xtol=1e-15, ftol=1e-15, gtol=1e-15)
        z, r = sol.x, residual(sol.x)
        n, u = unpack(z)
        if np.max(np.abs(r)) >= 1e-6 or np.any(n < -1e-9):
            worst = int(np.argmax(np.abs(r)))
            i, j = net.od_pairs[worst]
            raise InfeasibleSteadyState(
                f"no steady state with u in bounds: balance of n_{i + 1}{j + 1} "
                f"off by {r[worst]:.4g} veh/s (best u = {np.round(u, 4).tolist()})")
    return SteadyState(n, u, n_bar.copy(), q_star.copy())


@dataclass
class ClampEvent:
    t: float
    kind: str
    region: int
    amount: float

    def __str__(self):
        return f"{self.kind}@r{self.region + 1}:{self.amount:.3g}"


def _clamp(net, prm, n_old, n_new, t, events):
    lay = net._idx
    if np.any(n_new < 0):
        for m in np.flatnonzero(n_new < 0):
            events.append(ClampEvent(t, "floor", int(lay.origin[m]), float(-n_new[m])))
        n_new = np.maximum(n_new, 0.0)
    jam = np.array([p.n_jam for p in prm])
    totals = lay.membership @ n_new
    for i in np.flatnonzero(totals > jam):
        own = lay.origin == i
        delta = n_new[own] - n_old[own]
        gain = np.clip(delta, 0.0, None)
        base = n_old[own] + np.clip(delta, None, 0.0)
        room = max(jam[i] - base.sum(), 0.0)
        scale = room / gain.sum() if gain.sum() > 0 else 0.0
        n_new[own] = base + scale * gain
        events.append(ClampEvent(t, "jam", int(i), float(totals[i] - jam[i])))
    return n_new


def step(net: RegionNetwork, params, state: AccumulationState, u, demand: DemandFn,
         dt: float, max_substep: float = 1.0, events: list | None = None) -> AccumulationState:
    """Advance by dt with classical RK4, u held constant over the step.

    Substeps are at most ``max_substep`` seconds. Accumulations are floored
    at zero and regional totals capped at n_jam by scaling the substep's
    inflow; every such correction is appended to ``events``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    prm = _per_region(net, params)
    u = np.asarray(u, dtype=float)
    n_sub = max(1, int(np.ceil(dt / max_substep - 1e-9)))
    h = dt / n_sub
    n = state.n.copy()
    t = state.t
    ev = [] if events is None else events
    for _ in range(n_sub):
        k1 = _rhs(net, prm, n, u, demand(t))
        k2 = _rhs(net, prm, n + 0.5 * h * k1, u, demand(t + 0.5 * h))
        k3 = _rhs(net, prm, n + 0.5 * h * k2, u, demand(t + 0.5 * h))
        k4 = _rhs(net, prm, n + h * k3, u, demand(t + h))
        n_new = n + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t + h
        if np.any(n_new < 0) or np.any(net._idx.membership @ n_new > [p.n_jam for p in prm]):
            n_new = _clamp(net, prm, n, n_new, t, ev)
        n = n_new
    if ev and events is None:
        for e in ev:
            log.debug("clamp event %s at t=%.1f", e, e.t)
    return AccumulationState(n, state.t + dt)


def rollout(net: RegionNetwork, params, n0, controls, demand: DemandFn, t0: float,
            step_s: float, substep: float = 1.0) -> np.ndarray:
    """Batched RK4 prediction for many control sequences at once.

    ``controls`` has shape (batch, horizon, alpha_u), each entry held for
    ``step_s`` seconds. Returns states of shape (batch, horizon + 1, alpha_n).
    States are floored at 0 and regional totals are capped at n_jam by
    proportional scaling; no events are logged (prediction only).
    """
    prm = _per_region(net, params)
    lay = net._idx
    U = np.asarray(controls, dtype=float)
    B, H, _ = U.shape
    jam = np.array([p.n_jam for p in prm])
    n = np.broadcast_to(np.asarray(n0, dtype=float), (B, net.alpha_n)).copy()
    out = np.empty((B, H + 1, net.alpha_n))
    out[:, 0] = n
    n_sub = max(1, int(np.ceil(step_s / substep - 1e-9)))
    h = step_s / n_sub
    t = t0
    for k in range(H):
        u = U[:, k]
        for _ in range(n_sub):
            k1 = _rhs(net, prm, n, u, demand(t))
            k2 = _rhs(net, prm, n + 0.5 * h * k1, u, demand(t + 0.5 * h))
            k3 = _rhs(net, prm, n + 0.5 * h * k2, u, demand(t + 0.5 * h))
            k4 = _rhs(net, prm, n + h * k3, u, demand(t + h))
            n = np.maximum(n + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4), 0.0)
            tot = n @ lay.membership.T
            over = np.maximum(tot / jam, 1.0)
            n = n / over[:, lay.origin]
            t += h
        out[:, k + 1] = n
    return out


def constant_demand(q: Sequence[float]) -> DemandFn:
    q = np.asarray(q, dtype=float)
    return lambda t: q
