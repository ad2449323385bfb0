"""Model-free actor-critic learner driven by reinforcement-interval data."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .basis import BasisSpec, eval_actor, eval_critic
from .cost import drive_penalty, saturate

log = logging.getLogger(__name__)


class LearnerDivergence(RuntimeError):
    """Raised when an update produces non-finite weights."""


@dataclass
class AcWeights:
    """Critic weights w_V (K_V,) and actor weights w_D (K_D, alpha_u)."""

    w_V: np.ndarray
    w_D: np.ndarray

    def __post_init__(self):
        self.w_V = np.asarray(self.w_V, dtype=float).ravel()
        self.w_D = np.atleast_2d(np.asarray(self.w_D, dtype=float))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.w_V.size, self.w_D.shape[0], self.w_D.shape[1]

    def pack(self) -> np.ndarray:
        # column-major vec so that entry k_u * K_D + p is w_D[p, k_u]
        return np.concatenate([self.w_V, self.w_D.ravel(order="F")])

    @classmethod
    def unpack(cls, W, K_V: int, K_D: int, alpha_u: int) -> "AcWeights":
        W = np.asarray(W, dtype=float)
        if W.size != K_V + K_D * alpha_u:
            raise ValueError(f"packed length {W.size} != {K_V} + {K_D}*{alpha_u}")
        return cls(W[:K_V].copy(), W[K_V:].reshape((K_D, alpha_u), order="F").copy())

    @classmethod
    def zeros(cls, K_V: int, K_D: int, alpha_u: int) -> "AcWeights":
        return cls(np.zeros(K_V), np.zeros((K_D, alpha_u)))

    def copy(self) -> "AcWeights":
        return AcWeights(self.w_V.copy(), self.w_D.copy())


@dataclass(frozen=True)
class ReplaySample:
    phi: np.ndarray
    chi: float
    t_end: float
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("reinforcement interval must be positive")
        if not (np.all(np.isfinite(self.phi)) and np.isfinite(self.chi)):
            raise ValueError("sample contains non-finite values")


class ReplayBuffer:
    """Fixed-capacity FIFO history stack of interval samples."""

    def __init__(self, capacity: int = 1000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[ReplaySample] = deque(maxlen=capacity)

    def push(self, sample: ReplaySample) -> None:
        self._items.append(sample)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i) -> ReplaySample:
        return self._items[i]

    def features(self, idx=None) -> np.ndarray:
        items = self._items if idx is None else [self._items[i] for i in idx]
        return np.array([s.phi for s in items])

    def costs(self, idx=None) -> np.ndarray:
        items = self._items if idx is None else [self._items[i] for i in idx]
        return np.array([s.chi for s in items])


@dataclass(frozen=True)
class LearnerConfig:
    beta: float = 0.01
    dt_reinforce: float = 1.0
    dt_control: float = 1.0
    batch: int = 250
    capacity: int = 1000
    seed: int = 0
    # optional (dt_reinforce, beta) pairs applied by set_reinforcement_interval
    schedule: tuple = ()

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.dt_reinforce <= 0:
            raise ValueError("dt_reinforce must be positive")
        if self.dt_control < self.dt_reinforce:
            raise ValueError("dt_control must not be smaller than dt_reinforce")
        if self.batch < 0 or self.capacity < 1:
            raise ValueError("batch must be >= 0 and capacity >= 1")

    def beta_for(self, dt: float) -> float | None:
        for d, b in self.schedule:
            if abs(float(d) - dt) < 1e-9:
                return float(b)
        return None


def actor_drive(weights: AcWeights, x) -> np.ndarray:
    """Unconstrained actor output D = w_D^T phi_D(x)."""
    return eval_actor(None, x) @ weights.w_D


def target_control(weights: AcWeights, x, frame_bounds) -> np.ndarray:
    """Actor's saturated control in the frame of ``frame_bounds``."""
    return saturate(frame_bounds, actor_drive(weights, x))


def act(weights: AcWeights, x, frame_bounds, u_star) -> np.ndarray:
    """Raw-frame control u = u* + saturate(w_D^T x); strictly inside the box."""
    return np.asarray(u_star, dtype=float) + target_control(weights, x, frame_bounds)


def accumulate_sample(spec: BasisSpec, weights: AcWeights, frame_bounds, Q, R,
                      n_err, u_err, times, dt: float | None = None,
                      state_cost=None) -> ReplaySample:
    """Build (phi, chi) for one reinforcement interval.

    ``n_err`` holds m+1 error states at ``times`` (raw vehicles); ``u_err``
    holds the m behaviour controls, u_err[k] applied on [times[k], times[k+1]).
    Each substep is integrated with the trapezoid rule using the held control.
    ``state_cost`` maps the (m+1, alpha_n) states to per-row costs and
    replaces the quadratic n~^T Q n~ when given.
    """
    n_err = np.atleast_2d(np.asarray(n_err, dtype=float))
    times = np.asarray(times, dtype=float)
    if u_err is None:
        raise ValueError("missing behaviour control record")
    u_err = np.atleast_2d(np.asarray(u_err, dtype=float))
    if len(times) != len(n_err) or len(u_err) != len(n_err) - 1 or len(u_err) == 0:
        raise ValueError("segment needs m+1 states, m+1 times and m controls")
    span = times[-1] - times[0]
    dt = span if dt is None else dt
    if span < dt - 1e-9:
        raise ValueError(f"segment covers {span:g} s, shorter than interval {dt:g} s")

    x = n_err / spec.input_scale
    Q = np.asarray(Q, dtype=float)
    v = frame_bounds.v_under
    gam = np.asarray(R, dtype=float)
    gam = np.diag(gam) if gam.ndim == 2 else gam

    D = x @ weights.w_D  # (m+1, alpha_u)
    u_tgt = saturate(frame_bounds, D)
    pen = drive_penalty(frame_bounds, gam, D)
    if state_cost is None:
        run_cost = np.einsum("ni,ij,nj->n", n_err, Q, n_err) + pen
    else:
        run_cost = np.asarray(state_cost(n_err), dtype=float) + pen
    h = np.diff(times)
    chi = float(np.sum(0.5 * h * (run_cost[:-1] + run_cost[1:])))

    # actor block: -int (2 v R (u - u')) kron phi_D
    left = np.einsum("ka,kp->kap", 2 * v * gam * (u_err - u_tgt[:-1]), x[:-1])
    right = np.einsum("ka,kp->kap", 2 * v * gam * (u_err - u_tgt[1:]), x[1:])
    blk = -np.sum(0.5 * h[:, None, None] * (left + right), axis=0)  # (alpha_u, K_D)
    top = eval_critic(spec, x[-1]) - eval_critic(spec, x[0])
    phi = np.concatenate([top, blk.ravel()])
    return ReplaySample(phi, chi, float(times[-1]), float(dt))


def td_error(sample: ReplaySample, W) -> float:
    W = np.asarray(W, dtype=float)
    if W.shape != sample.phi.shape:
        raise ValueError(f"weight length {W.size} != feature length {sample.phi.size}")
    return float(sample.phi @ W + sample.chi)


@dataclass(frozen=True)
class RankReport:
    satisfied: bool
    rank: int
    # smallest retained singular value over the cutoff; > 1 means margin
    threshold_gap: float


def rank_check(buffer, dim: int | None = None) -> RankReport:
    """Numerical rank of the stacked stored features."""
    B = buffer.features() if isinstance(buffer, ReplayBuffer) else np.asarray(buffer, dtype=float)
    if B.size == 0:
        raise ValueError("buffer is empty")
    dim = B.shape[1] if dim is None else dim
    s = np.linalg.svd(B, compute_uv=False)
    tol = s[0] * max(B.shape) * np.finfo(float).eps if s[0] > 0 else np.finfo(float).eps
    rank = int(np.sum(s > tol))
    k = min(dim, s.size) - 1
    gap = float(s[k] / tol) if k >= 0 else 0.0
    return RankReport(rank == dim, rank, gap)


def er_update(W, current: ReplaySample | None, buffer: ReplayBuffer | None, beta: float,
              dt_control: float, batch: int | None = None,
              rng: np.random.Generator | None = None, max_gain: float = 1.0,
              max_substeps: int = 1000) -> np.ndarray:
    """Explicit-Euler integration of the normalised replay gradient law over dt_control.

    The data are frozen for the whole interval. The interval is cut into the
    fewest equal Euler substeps h with beta * h * trace(sum phibar phibar^T)
    <= max_gain, so the discrete map stays contractive; a single substep is
    used whenever that already holds. At most ``max_substeps`` are taken;
    beyond that the map is no longer contractive and a far too large rate
    shows up as divergence.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    W = np.asarray(W, dtype=float)
    rows = [] if current is None else [current.phi]
    costs = [] if current is None else [current.chi]
    if buffer is not None and len(buffer):
        size = len(buffer)
        if batch is None or batch >= size:
            idx = np.arange(size)
        else:
            rng = np.random.default_rng() if rng is None else rng
            idx = np.sort(rng.choice(size, batch, replace=False))
        rows.extend(buffer.features(idx))
        costs.extend(buffer.costs(idx))
    if not rows:
        return W.copy()
    P = np.asarray(rows)
    c = np.asarray(costs)
    m = 1.0 + np.einsum("ij,ij->i", P, P)
    Pn = P / (m * m)[:, None]
    trace = float(np.einsum("ij,ij->", Pn, P))
    need = beta * dt_control * trace / max_gain
    n_sub = int(min(max(1.0, np.ceil(need)), max_substeps))
    h = dt_control / n_sub
    for _ in range(n_sub):
        with np.errstate(over="ignore", invalid="ignore"):
            e = P @ W + c
            W = W - beta * h * (Pn.T @ e)
        if not np.all(np.isfinite(W)):
            raise LearnerDivergence(
                f"non-finite weights after update (beta={beta:g}, max|e|={np.max(np.abs(e)):.3g}); "
                "reduce the learning rate")
    return W


def set_reinforcement_interval(config: LearnerConfig, new_dt: float) -> LearnerConfig:
    if new_dt <= 0:
        raise ValueError("reinforcement interval must be positive")
    if new_dt > config.dt_control + 1e-12:
        raise ValueError(f"reinforcement interval {new_dt:g} s exceeds control step "
                         f"{config.dt_control:g} s")
    if new_dt == config.dt_reinforce:
        return config
    beta = config.beta_for(new_dt)
    return replace(config, dt_reinforce=float(new_dt),
                   beta=config.beta if beta is None else beta)


@dataclass
class IrlLearner:
    """Single-owner learner: records substeps, emits samples, updates, acts.

    Inputs given to ``record`` are error-frame quantities in raw units; the
    basis input scale is applied internally.
    """

    spec: BasisSpec
    weights: AcWeights
    config: LearnerConfig
    frame_bounds: object
    Q: np.ndarray
    R: np.ndarray
    buffer: ReplayBuffer = None
    rng: np.random.Generator = None
    last_td: float = float("nan")
    updates: int = 0
    # optional replacement for the quadratic state cost (see accumulate_sample)
    state_cost: object = None
    _times: list = field(default_factory=list)
    _states: list = field(default_factory=list)
    _controls: list = field(default_factory=list)
    _pending: ReplaySample | None = None

    def __post_init__(self):
        if self.buffer is None:
            self.buffer = ReplayBuffer(self.config.capacity)
        if self.rng is None:
            self.rng = np.random.default_rng(self.config.seed)

    @property
    def dim(self) -> int:
        return self.spec.K_V + self.spec.K_D * self.weights.w_D.shape[1]

    def drive(self, n_err) -> np.ndarray:
        return actor_drive(self.weights, np.asarray(n_err, dtype=float) / self.spec.input_scale)

    def target(self, n_err) -> np.ndarray:
        return saturate(self.frame_bounds, self.drive(n_err))

    def start(self, t: float, n_err) -> None:
        self._times = [float(t)]
        self._states = [np.asarray(n_err, dtype=float)]
        self._controls = []

    def record(self, t: float, u_err, n_err) -> ReplaySample | None:
        """Log that u_err was held up to time t, ending at state n_err.

        Returns the completed sample when the reinforcement interval closes.
        """
        self._controls.append(np.asarray(u_err, dtype=float))
        self._times.append(float(t))
        self._states.append(np.asarray(n_err, dtype=float))
        if self._times[-1] - self._times[0] < self.config.dt_reinforce - 1e-9:
            return None
        s = accumulate_sample(self.spec, self.weights, self.frame_bounds, self.Q, self.R,
                              self._states, self._controls, self._times,
                              state_cost=self.state_cost)
        self.buffer.push(s)
        self._pending = s
        self.start(self._times[-1], self._states[-1])
        return s

    def update(self) -> float:
        """ER step at the control cadence; returns the current TD error."""
        cur = self._pending
        W = self.weights.pack()
        if cur is None:
            return self.last_td
        W = er_update(W, cur, self.buffer, self.config.beta, self.config.dt_control,
                      self.config.batch, self.rng)
        K_V, K_D, a_u = self.weights.shape
        self.weights = AcWeights.unpack(W, K_V, K_D, a_u)
        self.last_td = td_error(cur, W)
        self.updates += 1
        return self.last_td

    def set_interval(self, new_dt: float) -> None:
        self.config = set_reinforcement_interval(self.config, new_dt)

    def checkpoint(self) -> dict:
        return {"weights": self.weights.pack().tolist(), "basis_digest": self.spec.digest(),
                "K_V": self.spec.K_V, "K_D": self.spec.K_D,
                "alpha_u": int(self.weights.w_D.shape[1])}
