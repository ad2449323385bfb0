"""Model-based comparators and oracles for the learned controller."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .basis import BasisSpec, eval_critic, eval_critic_grad
from .cost import ControlBounds, drive_penalty, input_penalty, log_cosh, saturate
from .irl import AcWeights
from .mfd import (ConfigurationError, RegionNetwork, SteadyState, _per_region, affine_decompose,
                  input_matrix, rollout, state_derivative, step)

log = logging.getLogger(__name__)


def _gamma(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    return np.diag(R) if R.ndim == 2 else R


# ---------------------------------------------------------------- HJB pieces

def value(spec: BasisSpec, w_V, n_err) -> np.ndarray:
    return eval_critic(spec, np.asarray(n_err, dtype=float) / spec.input_scale) @ np.asarray(w_V)


def value_gradient(spec: BasisSpec, w_V, n_err) -> np.ndarray:
    """dV/dn~ in 1/veh units; (alpha_n,) or (N, alpha_n)."""
    x = np.asarray(n_err, dtype=float) / spec.input_scale
    G = eval_critic_grad(spec, x) / spec.input_scale
    return np.einsum("...ki,k->...i", G, np.asarray(w_V, dtype=float))


def optimal_drive(grad_V, S, R, frame_bounds) -> np.ndarray:
    """D* = (1/(2 v)) R^-1 S^T dV/dn~."""
    g = np.einsum("...ij,...i->...j", S, grad_V)
    return g / (2.0 * frame_bounds.v_under * _gamma(R))


def hjb_residual(spec: BasisSpec, w_V, n_err, F, S, Q, R, frame_bounds) -> np.ndarray:
    """HJB residual with the minimising saturated control substituted.

    n~^T Q n~ + dV^T F + dV^T S v_bar + sum_k v_k^2 gamma_k ln(1 - tanh^2 D_k).
    Accepts one state or a batch.
    """
    n_err = np.asarray(n_err, dtype=float)
    gV = value_gradient(spec, w_V, n_err)
    D = optimal_drive(gV, S, R, frame_bounds)
    v = frame_bounds.v_under
    # ln(1 - tanh^2 D) = -2 log cosh D, finite for any D
    sat = np.sum(v * v * _gamma(R) * (-2.0 * log_cosh(D)), axis=-1)
    Sv = np.einsum("...ij,j->...i", S, frame_bounds.v_bar)
    quad = np.einsum("...i,ij,...j->...", n_err, np.asarray(Q, dtype=float), n_err)
    return quad + np.sum(gV * F, axis=-1) + np.sum(gV * Sv, axis=-1) + sat


def hamiltonian(spec: BasisSpec, w_V, n_err, F, S, Q, R, frame_bounds, u_err) -> float:
    """Q-cost + penalty(u~) + dV^T (F + S u~) for one state and control."""
    n_err = np.asarray(n_err, dtype=float)
    gV = value_gradient(spec, w_V, n_err)
    return float(n_err @ np.asarray(Q) @ n_err + input_penalty(frame_bounds, R, u_err)
                 + gV @ (F + S @ np.asarray(u_err, dtype=float)))


# ---------------------------------------------------------------- linear laws

def linearize(net: RegionNetwork, params, steady: SteadyState, h: float = 1e-3):
    """Jacobians (A, B) of the dynamics at (n*, u*, q*) by central differences."""
    A = np.zeros((net.alpha_n, net.alpha_n))
    for j in range(net.alpha_n):
        e = np.zeros(net.alpha_n)
        e[j] = h
        A[:, j] = (state_derivative(net, params, steady.n_star + e, steady.u_star, steady.q_star)
                   - state_derivative(net, params, steady.n_star - e, steady.u_star,
                                      steady.q_star)) / (2 * h)
    return A, input_matrix(net, params, steady.n_star)


def lqr_gain(A, B, Q, R, return_cost: bool = False):
    """K with u~ = -K n~ minimising the quadratic cost of the linear model.

    With ``return_cost`` the Riccati matrix P (value n~^T P n~) is returned too.
    """
    Rm = np.diag(_gamma(R))
    P = scipy.linalg.solve_continuous_are(A, B, np.asarray(Q, dtype=float), Rm)
    K = np.linalg.solve(Rm, B.T @ P)
    return (K, P) if return_cost else K


def quadratic_critic(spec: BasisSpec, P) -> np.ndarray:
    """Critic weights reproducing V = n~^T P n~ (zero on higher monomials)."""
    P = np.asarray(P, dtype=float)
    s2 = spec.input_scale ** 2
    w = np.zeros(spec.K_V)
    for k, e in enumerate(spec.exponents):
        if e.sum() != 2:
            continue
        idx = np.flatnonzero(e)
        if idx.size == 1:
            w[k] = P[idx[0], idx[0]] * s2
        else:
            w[k] = 2.0 * P[idx[0], idx[1]] * s2
    if spec.K_V and not np.any(spec.exponents.sum(axis=1) == 2):
        raise ValueError("basis has no quadratic monomials")
    return w


def regional_gain(net: RegionNetwork, kappa: float, n_jam: float) -> np.ndarray:
    """Gain for u_ij = u*_ij + kappa (n_bar_j - n_j) / n_jam, as u~ = -K n~."""
    K = np.zeros((net.alpha_u, net.alpha_n))
    members = net._idx.membership
    for c, (_, j) in enumerate(net.control_pairs):
        K[c] = kappa / n_jam * members[j]
    return K


@dataclass
class LinearFeedbackPolicy:
    """u = clip(u* - K n~ + noise) with seeded, piecewise-constant uniform noise.

    The noise amplitude decays linearly to zero over ``noise_decay_s``
    (no decay when it is None). Controls stay strictly inside ``bounds``.
    """

    steady: SteadyState
    gain: np.ndarray
    bounds: ControlBounds
    noise: float = 0.0
    seed: int = 0
    noise_decay_s: float | None = None
    _rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        self.gain = np.atleast_2d(np.asarray(self.gain, dtype=float))
        self._rng = np.random.default_rng(self.seed)

    def amplitude(self, t: float) -> float:
        if self.noise_decay_s is None:
            return self.noise
        return self.noise * max(0.0, 1.0 - t / self.noise_decay_s)

    def __call__(self, n, t: float = 0.0) -> np.ndarray:
        n_err = np.asarray(n, dtype=float) - self.steady.n_star
        u = self.steady.u_star - self.gain @ n_err
        amp = self.amplitude(t)
        if amp > 0:
            u = u + self._rng.uniform(-amp, amp, u.shape)
        return clip_inside(self.bounds, u)

    def actor_weights(self, spec: BasisSpec, frame_bounds, K_V: int | None = None) -> AcWeights:
        """Linear actor matching this law for small deviations.

        Uses -v tanh(D) ~ -v D near the origin, so w_D = (K / v)^T * input_scale.
        """
        K_V = spec.K_V if K_V is None else K_V
        w_D = (self.gain / frame_bounds.v_under[:, None]).T * spec.input_scale
        return AcWeights(np.zeros(K_V), w_D)


def clip_inside(bounds, u, margin: float = 1e-6) -> np.ndarray:
    width = bounds.u_max - bounds.u_min
    return np.clip(u, bounds.u_min + margin * width, bounds.u_max - margin * width)


def initial_admissible(steady: SteadyState, gain, noise: float, seed: int,
                       bounds: ControlBounds, noise_decay_s: float | None = None,
                       net: RegionNetwork | None = None, n_jam: float = 10000.0
                       ) -> LinearFeedbackPolicy:
    """Stabilising starting law with seeded exploration deviations.

    ``gain`` is either a scalar kappa, giving the regional destination law
    u_ij = u*_ij + kappa (n_bar_j - n_j) / n_jam (``net`` required), or a full
    (alpha_u, alpha_n) matrix K for u = u* - K n~.
    """
    K = np.asarray(gain, dtype=float)
    if K.ndim == 0:
        if net is None:
            raise ConfigurationError("scalar gain needs the network layout")
        K = regional_gain(net, float(K), n_jam)
    return LinearFeedbackPolicy(steady, K, bounds, noise, seed, noise_decay_s)


@dataclass(frozen=True)
class AdmissibilityReport:
    ok: bool
    max_regional: float
    final_regional: np.ndarray
    message: str


def check_admissible(policy, net: RegionNetwork, params, n0, demand, horizon_s: float,
                     dt_control: float) -> AdmissibilityReport:
    """Closed-loop run: regional totals must stay strictly below n_jam."""
    from .mfd import AccumulationState

    jam = np.array([p.n_jam for p in _per_region(net, params)])
    st = AccumulationState(np.asarray(n0, dtype=float))
    peak = net.regional(st.n).max()
    steps = int(round(horizon_s / dt_control))
    for _ in range(steps):
        u = policy(st.n, st.t)
        st = step(net, params, st, u, demand, dt_control)
        reg = net.regional(st.n)
        peak = max(peak, reg.max())
        if np.any(reg >= jam * (1 - 1e-9)):
            return AdmissibilityReport(False, float(peak), reg,
                                       f"region reached n_jam at t={st.t:.0f} s; adjust the gain")
    return AdmissibilityReport(True, float(peak), net.regional(st.n), "ok")


# ---------------------------------------------------------------- policy iteration

@dataclass(frozen=True)
class PiOracleConfig:
    n_points: int = 5000
    # sampling box half-width as a fraction of n_jam around n~ = 0
    box_fraction: float = 0.3
    max_iter: int = 20
    tol: float = 1e-6
    seed: int = 0
    # drop samples whose absolute state leaves [0, n_jam]
    feasible_only: bool = True

    def __post_init__(self):
        if self.n_points < 1 or self.max_iter < 1 or not self.box_fraction > 0:
            raise ValueError("invalid policy-iteration configuration")


@dataclass
class PiResult:
    weights: AcWeights
    points: np.ndarray
    values: list  # V^k at the collocation points, one array per iteration
    residuals: list  # max |Bellman residual| / max running cost, per iteration
    iterations: int
    converged: bool
    critics: list = field(default_factory=list)  # w_V per iteration


def collocation_points(net: RegionNetwork, params, steady: SteadyState,
                       config: PiOracleConfig) -> np.ndarray:
    jam = np.array([p.n_jam for p in _per_region(net, params)])
    half = config.box_fraction * jam.max()
    rng = np.random.default_rng(config.seed)
    out = []
    need = config.n_points
    for _ in range(50):
        X = rng.uniform(-half, half, (max(need * 2, 100), net.alpha_n))
        if config.feasible_only:
            N = X + steady.n_star
            ok = np.all(N >= 0, axis=1) & np.all(N @ net._idx.membership.T < jam, axis=1)
            X = X[ok]
        out.append(X[:need])
        need -= len(out[-1])
        if need <= 0:
            break
    X = np.concatenate(out)
    if len(X) < config.n_points:
        raise ConfigurationError("could not place enough feasible collocation points")
    return X


def policy_iteration(net: RegionNetwork, params, steady: SteadyState, spec: BasisSpec,
                     Q, R, frame_bounds, config: PiOracleConfig,
                     initial: AcWeights) -> PiResult:
    """Least-squares collocation policy iteration on the MFD error dynamics."""
    if config.n_points < spec.K_V:
        raise ConfigurationError("fewer collocation points than critic weights")
    X = collocation_points(net, params, steady, config)
    F, S = affine_decompose(net, params, X + steady.n_star, steady)
    return policy_iteration_on(X, F, S, spec, Q, R, frame_bounds, config, initial)


def policy_iteration_on(X, F, S, spec: BasisSpec, Q, R, frame_bounds, config: PiOracleConfig,
                        initial: AcWeights) -> PiResult:
    """Policy iteration with a linear actor on given collocation data.

    X (N, dim) are error states with drift F (N, dim) and input matrices
    S (N, dim, alpha_u). Evaluation solves L(n~, u^k) + (grad phi_V w_V)^T
    (F + S u^k) = 0 in the least-squares sense; improvement fits w_D to
    (1/(2v)) R^-1 S^T grad V.
    """
    X = np.asarray(X, dtype=float)
    xs = X / spec.input_scale
    Gphi = eval_critic_grad(spec, xs) / spec.input_scale  # (N, K_V, dim)
    Phi_V = eval_critic(spec, xs)
    Q = np.asarray(Q, dtype=float)
    quad = np.einsum("ni,ij,nj->n", X, Q, X)
    gam = _gamma(R)
    w_D = initial.w_D.copy()
    w_V = initial.w_V.copy()
    values, residuals, critics = [], [], []
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        D = xs @ w_D
        U = saturate(frame_bounds, D)
        cost = quad + drive_penalty(frame_bounds, gam, D)
        xdot = F + np.einsum("nij,nj->ni", S, U)
        A = np.einsum("nki,ni->nk", Gphi, xdot)
        w_new, *_ = np.linalg.lstsq(A, -cost, rcond=None)
        rank = np.linalg.matrix_rank(A)
        if rank < spec.K_V:
            log.warning("policy evaluation rank %d < %d; enlarge the collocation set",
                        rank, spec.K_V)
        values.append(Phi_V @ w_new)
        critics.append(w_new)
        residuals.append(float(np.max(np.abs(A @ w_new + cost)) / max(np.max(cost), 1e-300)))
        gV = np.einsum("nki,k->ni", Gphi, w_new)
        target = optimal_drive(gV, S, gam, frame_bounds)
        w_D_new, *_ = np.linalg.lstsq(xs, target, rcond=None)
        change = (np.linalg.norm(w_new - w_V) / max(np.linalg.norm(w_new), 1e-300)
                  + np.linalg.norm(w_D_new - w_D) / max(np.linalg.norm(w_D_new), 1e-300))
        w_V, w_D = w_new, w_D_new
        if change < config.tol:
            converged = True
            break
    return PiResult(AcWeights(w_V, w_D), X, values, residuals, it, converged, critics)


# ---------------------------------------------------------------- MPC

@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 30
    step_s: float = 60.0
    iterations: int = 15
    fd_eps: float = 1e-4
    # "warm" shifts the previous plan; "midpoint" restarts from bound midpoints
    init: str = "warm"
    # integrator substep of the internal prediction
    substep_s: float = 5.0
    initial_step: float = 0.2

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.init not in ("warm", "midpoint"):
            raise ValueError("init must be 'warm' or 'midpoint'")


@dataclass
class MpcObjective:
    """Stage cost of the receding-horizon problem.

    kind "setpoint": n~^T Q n~ integrated plus the saturation penalty of u~;
    kind "tts": sum of regional accumulations plus lambda_bar * ||u||_2.
    """

    kind: str
    net: RegionNetwork
    steady: SteadyState | None = None
    Q: np.ndarray | None = None
    R: np.ndarray | None = None
    lambda_bar: float = 0.0

    def __call__(self, states: np.ndarray, controls: np.ndarray, bounds: ControlBounds,
                 step_s: float) -> np.ndarray:
        if self.kind == "setpoint":
            e = states - self.steady.n_star
            run = np.einsum("bki,ij,bkj->bk", e, self.Q, e)
            x = (controls - bounds.v_bar) / bounds.v_under
            x = np.clip(x, -1 + 1e-12, 1 - 1e-12)
            pen = np.sum(2 * bounds.v_under ** 2 * _gamma(self.R)
                         * (x * np.arctanh(x) + 0.5 * np.log1p(-x * x)), axis=-1)
        elif self.kind == "tts":
            run = states.sum(axis=-1)
            pen = self.lambda_bar * np.linalg.norm(controls, axis=-1)
        else:
            raise ConfigurationError(f"unknown objective {self.kind!r}")
        state_part = 0.5 * step_s * (run[:, :-1] + run[:, 1:]).sum(axis=1)
        return state_part + step_s * pen.sum(axis=1)


class MpcController:
    """Certainty-equivalent receding-horizon controller.

    Projected gradient descent on piecewise-constant controls; the gradient is
    a forward finite difference computed from one batched prediction.
    """

    def __init__(self, net: RegionNetwork, params, bounds: ControlBounds, objective: MpcObjective,
                 config: MpcConfig = MpcConfig(), forecast=None):
        self.net, self.params, self.bounds = net, params, bounds
        self.objective, self.config = objective, config
        self.forecast = forecast
        self._plan: np.ndarray | None = None
        self._step = config.initial_step
        width = bounds.u_max - bounds.u_min
        self._lo = bounds.u_min + 1e-3 * width
        self._hi = bounds.u_max - 1e-3 * width

    def reset(self) -> None:
        self._plan = None
        self._step = self.config.initial_step

    def _cost(self, n, t, plans) -> np.ndarray:
        cfg = self.config
        states = rollout(self.net, self.params, n, plans, self.forecast, t, cfg.step_s,
                         cfg.substep_s)
        return self.objective(states, plans, self.bounds, cfg.step_s)

    def plan(self, n, t: float) -> np.ndarray:
        cfg = self.config
        H, m = cfg.horizon, self.net.alpha_u
        if self._plan is None or cfg.init == "midpoint":
            z = np.tile(self.bounds.v_bar, (H, 1))
        else:
            z = np.vstack([self._plan[1:], self._plan[-1:]])
        z = np.clip(z, self._lo, self._hi)
        J = self._cost(n, t, z[None])[0]
        for _ in range(cfg.iterations):
            pert = np.repeat(z[None], H * m, axis=0)
            idx = np.arange(H * m)
            pert.reshape(H * m, H * m)[idx, idx] += cfg.fd_eps
            Jp = self._cost(n, t, pert)
            g = ((Jp - J) / cfg.fd_eps).reshape(H, m)
            gmax = np.max(np.abs(g))
            if not np.isfinite(gmax) or gmax == 0:
                break
            d = -g / gmax
            improved = False
            for _ in range(10):
                cand = np.clip(z + self._step * d, self._lo, self._hi)
                Jc = self._cost(n, t, cand[None])[0]
                if Jc < J:
                    z, J = cand, Jc
                    improved = True
                    self._step = min(self._step * 1.5, 1.0)
                    break
                self._step *= 0.5
            if not improved:
                self._step = max(self._step, 1e-4)
                break
        self._plan = z
        return z

    def __call__(self, n, t: float = 0.0) -> np.ndarray:
        return self.plan(n, t)[0]


def mpc_control(net: RegionNetwork, params, n, t: float, forecast, config: MpcConfig,
                bounds: ControlBounds, objective: MpcObjective,
                warm: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One receding-horizon solve; returns (control sequence, first element)."""
    ctl = MpcController(net, params, bounds, objective, config, forecast)
    if warm is not None:
        ctl._plan = np.asarray(warm, dtype=float)
    seq = ctl.plan(n, t)
    return seq, seq[0]


# ---------------------------------------------------------------- static plan

def static_plan(bounds: ControlBounds) -> np.ndarray:
    """Fixed-time plan: the bound midpoints, held for the whole run."""
    return bounds.v_bar.copy()
