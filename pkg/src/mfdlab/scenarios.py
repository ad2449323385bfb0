"""Scenario definitions, demand generators, metrics and the closed-loop driver."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .baselines import (MpcConfig, MpcController, MpcObjective, PiOracleConfig, clip_inside,
                        linearize, lqr_gain, policy_iteration, quadratic_critic, regional_gain,
                        static_plan)
from .basis import gen_critic_basis
from .cost import ControlBounds, FrameBounds, saturate
from .irl import AcWeights, IrlLearner, LearnerConfig, LearnerDivergence, rank_check
from .mfd import (AccumulationState, ConfigurationError, MfdParams, RegionNetwork,
                  solve_steady_state, step, validate_state)

log = logging.getLogger(__name__)

CONTROLLERS = ("irl", "pi", "mpc", "static")

# reinforcement interval (s) -> learning rate
BETA_SCHEDULE = ((1.0, 1e-3), (15.0, 0.01), (20.0, 0.007), (30.0, 0.005), (45.0, 0.003),
                 (60.0, 1e-4), (90.0, 7e-5))


# ---------------------------------------------------------------- demand

@dataclass(frozen=True)
class DemandSpec:
    """Per-OD demand profile in veh/s.

    kind "constant" holds ``base``. The trapezoid kinds ramp from ``base`` to
    ``peak`` over [ramp_start_s, ramp_up_end_s], hold until plateau_end_s and
    return to ``base`` at ramp_down_end_s. "trapezoid+noise" multiplies every
    entry by 1 + cv * N(0, 1), redrawn every ``noise_step_s`` and clipped at
    0; "trapezoid+abrupt" scales the OD entries listed in ``abrupt_targets``
    by 1 + abrupt_gain during [abrupt_start_s, abrupt_start_s + abrupt_duration_s).
    """

    kind: str = "constant"
    base: tuple = ()
    peak: tuple = ()
    ramp_start_s: float = 0.0
    ramp_up_end_s: float = 1800.0
    plateau_end_s: float = 5400.0
    ramp_down_end_s: float = 9000.0
    noise_cv: float = 0.1
    noise_step_s: float = 60.0
    noise_seed: int = 0
    abrupt_start_s: float = 3600.0
    abrupt_duration_s: float = 1200.0
    abrupt_gain: float = 0.25
    abrupt_targets: tuple = ()

    KINDS = ("constant", "trapezoid", "trapezoid+noise", "trapezoid+abrupt")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigurationError(f"unknown demand kind {self.kind!r}")
        object.__setattr__(self, "base", tuple(float(x) for x in self.base))
        object.__setattr__(self, "peak", tuple(float(x) for x in self.peak))
        object.__setattr__(self, "abrupt_targets", tuple(int(i) for i in self.abrupt_targets))
        if not self.base or min(self.base) < 0:
            raise ConfigurationError("demand base levels must be non-negative")
        if self.kind != "constant":
            if len(self.peak) != len(self.base) or min(self.peak) < 0:
                raise ConfigurationError("peak levels must match base levels and be >= 0")
            t = (self.ramp_start_s, self.ramp_up_end_s, self.plateau_end_s, self.ramp_down_end_s)
            if any(b < a for a, b in zip(t, t[1:])):
                raise ConfigurationError("trapezoid times must be non-decreasing")
        if self.noise_cv < 0 or self.noise_step_s <= 0:
            raise ConfigurationError("noise settings out of range")

    def nominal(self) -> "DemandSpec":
        """The same profile without noise or abrupt change (a forecast)."""
        kind = "constant" if self.kind == "constant" else "trapezoid"
        return dataclasses.replace(self, kind=kind)


def _ramp_fraction(spec: DemandSpec, t: float) -> float:
    a, b, c, d = spec.ramp_start_s, spec.ramp_up_end_s, spec.plateau_end_s, spec.ramp_down_end_s
    if t < a or t >= d:
        return 0.0
    if t < b:
        return (t - a) / (b - a)
    if t < c:
        return 1.0
    return (d - t) / (d - c)


class Demand:
    """Deterministic evaluator q(t) for a DemandSpec."""

    def __init__(self, spec: DemandSpec):
        self.spec = spec
        self._base = np.array(spec.base)
        self._peak = np.array(spec.peak) if spec.peak else self._base
        self._noise: dict[int, np.ndarray] = {}

    def _multiplier(self, block: int) -> np.ndarray:
        m = self._noise.get(block)
        if m is None:
            rng = np.random.default_rng([self.spec.noise_seed, block])
            m = 1.0 + self.spec.noise_cv * rng.standard_normal(self._base.size)
            self._noise[block] = m
        return m

    def __call__(self, t: float) -> np.ndarray:
        s = self.spec
        if s.kind == "constant":
            return self._base.copy()
        q = self._base + (self._peak - self._base) * _ramp_fraction(s, t)
        if s.kind == "trapezoid+noise":
            q = np.maximum(q * self._multiplier(int(np.floor(t / s.noise_step_s))), 0.0)
        elif s.kind == "trapezoid+abrupt" and s.abrupt_start_s <= t < s.abrupt_start_s + s.abrupt_duration_s:
            q = q.copy()
            q[list(s.abrupt_targets)] *= 1.0 + s.abrupt_gain
        return q


def make_demand(spec: DemandSpec) -> Demand:
    return Demand(spec)


# ---------------------------------------------------------------- metrics

def settling_time(times, values, target, band: float = 0.02) -> list:
    """Earliest time after which each column stays within band * target.

    ``values`` is (T, L); returns one entry per column, None when the last
    sample is outside the band.
    """
    times = np.asarray(times, dtype=float)
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[0] != times.size:
        values = values.T
    target = np.broadcast_to(np.asarray(target, dtype=float), values.shape[1:])
    out = []
    for i in range(values.shape[1]):
        ok = np.abs(values[:, i] - target[i]) <= band * abs(target[i])
        if not ok[-1]:
            out.append(None)
            continue
        bad = np.flatnonzero(~ok)
        out.append(float(times[0]) if bad.size == 0 else float(times[bad[-1] + 1]))
    return out


def total_time_spent(times, totals, lambda_bar: float = 0.0, controls=None) -> float:
    """Trapezoidal integral of the network accumulation (veh s).

    ``totals`` is either the total accumulation per sample or a (T, k)
    array that is summed across columns. With lambda_bar > 0 the control
    term lambda_bar * ||u|| is added, u[k] being held on [t_k, t_k+1).
    """
    t = np.asarray(times, dtype=float)
    n = np.asarray(totals, dtype=float)
    if n.ndim == 2:
        n = n.sum(axis=1)
    if t.size < 2:
        return 0.0
    h = np.diff(t)
    tts = float(np.sum(0.5 * h * (n[:-1] + n[1:])))
    if lambda_bar and controls is not None:
        u = np.asarray(controls, dtype=float)
        tts += float(lambda_bar * np.sum(h * np.linalg.norm(u[:-1], axis=1)))
    return tts


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class ScenarioConfig:
    id: str
    topology: str = "two_region"
    n0: tuple = ()
    objective: str = "setpoint"
    n_bar: tuple = ()
    demand: DemandSpec = field(default_factory=lambda: DemandSpec("constant", (1.6,) * 4))
    # explicit box; empty means a box of bound_half_width centred on u*
    u_min: tuple = ()
    u_max: tuple = ()
    bound_half_width: float = 0.4
    # set-point cost: Q = q_weight * (I + regional_weight * M^T M), R = r_weight * I
    q_weight: float = 1e-6
    regional_weight: float = 1.0
    r_weight: float = 1.0
    lambda_bar: float = 1.0
    horizon_s: float = 10800.0
    dt_reinforce: float = 1.0
    dt_control: float = 1.0
    substep_s: float = 1.0
    seed: int = 0
    # learner
    beta: float = 0.0  # 0 looks the rate up in beta_schedule
    beta_schedule: tuple = BETA_SCHEDULE
    batch: int = 250
    capacity: int = 1000
    basis_degree: int = 6
    basis_min_degree: int = 2
    basis_max_vars: int = 0  # 0 keeps every monomial
    input_scale: float = 1000.0
    exploration: float = 0.02
    exploration_decay_s: float = 1800.0
    initial_law: str = "lqr"  # lqr | regional | balance | zero
    initial_gain: float = 0.0
    critic_init: str = "lqr"  # lqr (value of the linearised law) | zero
    rank_every_s: float = 600.0
    # baselines
    mpc_horizon: int = 30
    mpc_iterations: int = 15
    mpc_substep_s: float = 5.0
    pi_points: int = 3000
    pi_box_fraction: float = 0.1
    pi_iterations: int = 12
    log_every_s: float = 10.0

    def __post_init__(self):
        for name in ("n0", "n_bar", "u_min", "u_max"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        object.__setattr__(self, "beta_schedule",
                           tuple((float(a), float(b)) for a, b in self.beta_schedule))
        if isinstance(self.demand, dict):
            object.__setattr__(self, "demand", _from_dict(DemandSpec, self.demand))
        if self.topology not in ("two_region", "corridor3"):
            raise ConfigurationError(f"unknown topology {self.topology!r}")
        if self.objective not in ("setpoint", "tts"):
            raise ConfigurationError(f"unknown objective {self.objective!r}")
        if self.horizon_s <= 0:
            raise ConfigurationError("horizon must be positive")
        net = self.network()
        if len(self.n0) != net.alpha_n:
            raise ConfigurationError(f"n0 needs {net.alpha_n} OD accumulations")
        validate_state(net, MfdParams.reference(), np.array(self.n0))
        if len(self.demand.base) != net.alpha_n:
            raise ConfigurationError(f"demand needs {net.alpha_n} OD levels")
        if self.objective == "setpoint" and len(self.n_bar) != net.region_count:
            raise ConfigurationError("set-point objective needs one n_bar entry per region")
        if bool(self.u_min) != bool(self.u_max):
            raise ConfigurationError("give both u_min and u_max or neither")
        if self.objective == "tts" and not self.u_min:
            raise ConfigurationError("min-TTS scenarios need explicit control bounds")
        steps = [self.dt_reinforce, self.dt_control, self.log_every_s]
        for s in steps:
            if s <= 0 or abs(s / self.substep_s - round(s / self.substep_s)) > 1e-9:
                raise ConfigurationError("intervals must be positive multiples of substep_s")
        if self.dt_reinforce > self.dt_control:
            raise ConfigurationError("reinforcement interval exceeds the control step")
        if self.initial_law not in ("lqr", "regional", "balance", "zero"):
            raise ConfigurationError(f"unknown initial law {self.initial_law!r}")
        if self.critic_init not in ("lqr", "zero"):
            raise ConfigurationError(f"unknown critic initialisation {self.critic_init!r}")

    def network(self) -> RegionNetwork:
        return RegionNetwork.two_region() if self.topology == "two_region" else RegionNetwork.corridor(3)

    def learning_rate(self) -> float:
        if self.beta > 0:
            return self.beta
        for dt, b in self.beta_schedule:
            if abs(dt - self.dt_reinforce) < 1e-9:
                return b
        raise ConfigurationError(f"no learning rate for a {self.dt_reinforce:g} s interval")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return _from_dict(cls, d)


def _from_dict(cls, d: dict):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{cls.__name__} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigurationError(f"unknown keys for {cls.__name__}: {', '.join(unknown)}")
    kw = dict(d)
    if cls is ScenarioConfig and "demand" in kw:
        kw["demand"] = _from_dict(DemandSpec, kw["demand"])
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def with_overrides(config: ScenarioConfig, **changes) -> ScenarioConfig:
    return dataclasses.replace(config, **changes)


# ---------------------------------------------------------------- scenario factories

_A_N0 = (540.0, 1260.0, 2170.0, 930.0)
_C_N0 = (430.0, 3870.0, 370.0, 3330.0)
# regional start [5400, 5500, 2000]: half of region 1 bound for 2, region 2 split
# 30/40/30 and region 3 evenly
_S2_N0 = (2700.0, 2700.0, 1650.0, 2200.0, 1650.0, 1000.0, 1000.0)
_S2_BASE = (0.4, 0.5, 0.25, 0.4, 0.25, 0.25, 0.25)
_S2_PEAK = (1.3, 1.7, 0.7, 1.3, 0.7, 0.85, 0.7)
# inter-regional OD entries of the corridor: 12, 21, 23, 32
_S2_INTER = (1, 2, 4, 5)


def scenario_1a(dt: float = 1.0, seed: int = 0) -> ScenarioConfig:
    return ScenarioConfig("1A", n0=_A_N0, n_bar=(3000.0, 3000.0), dt_reinforce=dt,
                          dt_control=dt, seed=seed)


def scenario_1b(dt: float = 15.0, seed: int = 0) -> ScenarioConfig:
    return dataclasses.replace(scenario_1a(dt, seed), id="1B")


def scenario_1c(seed: int = 0) -> ScenarioConfig:
    return ScenarioConfig("1C", n0=_C_N0, n_bar=(4000.0, 4000.0), dt_reinforce=60.0,
                          dt_control=60.0, seed=seed)


def scenario_2(case: str = "nominal", seed: int = 0) -> ScenarioConfig:
    kinds = {"nominal": "trapezoid", "noisy": "trapezoid+noise", "abrupt": "trapezoid+abrupt"}
    if case not in kinds:
        raise ConfigurationError(f"unknown demand case {case!r}")
    demand = DemandSpec(kinds[case], _S2_BASE, _S2_PEAK, noise_seed=seed,
                        abrupt_targets=_S2_INTER)
    return ScenarioConfig(
        "2", topology="corridor3", n0=_S2_N0, objective="tts", demand=demand,
        u_min=(0.1, 0.3, 0.4, 0.2), u_max=(0.7, 1.0, 1.0, 0.9), lambda_bar=1.0,
        horizon_s=9000.0, dt_reinforce=60.0, dt_control=60.0, seed=seed,
        basis_degree=6, basis_min_degree=6, input_scale=10000.0,
        initial_law="balance", initial_gain=0.5, mpc_horizon=10)


def get_scenario(name: str, **kw) -> ScenarioConfig:
    table = {"1A": scenario_1a, "1B": scenario_1b, "1C": scenario_1c, "2": scenario_2}
    key = name.upper()
    if key not in table:
        raise ConfigurationError(f"unknown scenario {name!r}; choose from {sorted(table)}")
    return table[key](**kw)


# ---------------------------------------------------------------- setup

@dataclass
class Setup:
    """Everything derived from a config before the closed loop starts."""

    config: ScenarioConfig
    net: RegionNetwork
    params: MfdParams
    demand: Demand
    bounds: ControlBounds
    frame: FrameBounds
    n_offset: np.ndarray  # n* for set-points, 0 for TTS
    u_offset: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    steady: object = None

    @property
    def state_cost(self):
        if self.config.objective == "tts":
            return lambda X: np.sum(X, axis=-1)
        return None


def build_setup(config: ScenarioConfig) -> Setup:
    net = config.network()
    params = MfdParams.reference()
    demand = make_demand(config.demand)
    R = config.r_weight * np.ones(net.alpha_u)
    if config.objective == "setpoint":
        steady = solve_steady_state(net, params, config.n_bar, demand(0.0))
        if config.u_min:
            bounds = ControlBounds(config.u_min, config.u_max)
        else:
            bounds = ControlBounds.centered(steady.u_star, config.bound_half_width)
        if not bounds.contains(steady.u_star):
            raise ConfigurationError("u* lies outside the control bounds")
        Mm = net._idx.membership
        Q = config.q_weight * (np.eye(net.alpha_n) + config.regional_weight * Mm.T @ Mm)
        return Setup(config, net, params, demand, bounds, bounds.shifted(steady.u_star),
                     steady.n_star, steady.u_star, Q, R, steady)
    bounds = ControlBounds(config.u_min, config.u_max)
    R = config.lambda_bar * np.ones(net.alpha_u)
    zero_u = np.zeros(net.alpha_u)
    return Setup(config, net, params, demand, bounds, bounds.shifted(zero_u),
                 np.zeros(net.alpha_n), zero_u, np.zeros((net.alpha_n, net.alpha_n)), R)


def make_basis(config: ScenarioConfig, alpha_n: int):
    return gen_critic_basis(alpha_n, config.basis_degree, config.input_scale,
                            max_vars=config.basis_max_vars or None,
                            min_degree=config.basis_min_degree or None)


def initial_actor(setup: Setup, spec) -> AcWeights:
    """Linear actor weights for the configured starting law."""
    cfg, net = setup.config, setup.net
    K_V = spec.K_V
    v = setup.frame.v_under
    if cfg.initial_law == "zero":
        return AcWeights.zeros(K_V, spec.K_D, net.alpha_u)
    if cfg.initial_law == "balance":
        # D_ij = g (n_j - n_i) / 1000 veh: meter transfers into the fuller region
        Mm = net._idx.membership
        w_D = np.zeros((spec.K_D, net.alpha_u))
        for c, (i, j) in enumerate(net.control_pairs):
            w_D[:, c] = cfg.initial_gain * spec.input_scale / 1000.0 * (Mm[j] - Mm[i])
        return AcWeights(np.zeros(K_V), w_D)
    if setup.steady is None:
        raise ConfigurationError(f"initial law {cfg.initial_law!r} needs a set-point objective")
    w_V = np.zeros(K_V)
    if cfg.initial_law == "lqr":
        A, B = linearize(net, setup.params, setup.steady)
        K, P = lqr_gain(A, B, setup.Q, setup.R, return_cost=True)
        if cfg.critic_init == "lqr":
            w_V = quadratic_critic(spec, P)
    else:
        K = regional_gain(net, cfg.initial_gain, setup.params.n_jam)
    # small-signal match: -v tanh(D) ~ -v D = -K n~
    return AcWeights(w_V, (K / v[:, None]).T * spec.input_scale)


# ---------------------------------------------------------------- results

@dataclass
class RunResult:
    config: ScenarioConfig
    controller: str
    columns: list
    rows: np.ndarray
    row_events: list
    events: list
    metrics: dict
    times: np.ndarray  # full-resolution time grid
    regional: np.ndarray  # regional totals on that grid
    checkpoint: dict | None = None
    aborted: bool = False
    message: str = ""

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.columns.index(name)]


def csv_columns(net: RegionNetwork) -> list:
    return (["t_s"] + [f"n_{od}" for od in net.od_labels] + [f"u_{p}" for p in net.control_labels]
            + ["td_error", "rank_ok"])


# ---------------------------------------------------------------- closed loop

class _IrlPolicy:
    def __init__(self, setup: Setup):
        cfg = setup.config
        spec = make_basis(cfg, setup.net.alpha_n)
        lcfg = LearnerConfig(beta=cfg.learning_rate(), dt_reinforce=cfg.dt_reinforce,
                             dt_control=cfg.dt_control, batch=cfg.batch,
                             capacity=cfg.capacity, seed=cfg.seed,
                             schedule=cfg.beta_schedule)
        self.setup = setup
        self.learner = IrlLearner(spec, initial_actor(setup, spec), lcfg, setup.frame,
                                  setup.Q, setup.R, state_cost=setup.state_cost)
        self.rng = np.random.default_rng([cfg.seed, 7])
        self.rank_ok = 0
        self._next_rank = cfg.rank_every_s

    def start(self, n, t):
        self.learner.start(t, n - self.setup.n_offset)

    def decide(self, n, t, first: bool):
        if not first:
            self.learner.update()
        cfg = self.setup.config
        amp = cfg.exploration * max(0.0, 1.0 - t / cfg.exploration_decay_s) \
            if cfg.exploration_decay_s > 0 else cfg.exploration
        u_err = self.learner.target(n - self.setup.n_offset)
        if amp > 0:
            u_err = u_err + self.rng.uniform(-amp, amp, u_err.shape)
        return clip_inside(self.setup.bounds, u_err + self.setup.u_offset)

    def observe(self, t, u, n):
        self.learner.record(t, u - self.setup.u_offset, n - self.setup.n_offset)
        if t >= self._next_rank - 1e-9 and len(self.learner.buffer):
            self.rank_ok = int(rank_check(self.learner.buffer).satisfied)
            self._next_rank += self.setup.config.rank_every_s

    @property
    def td(self):
        return self.learner.last_td

    def checkpoint(self):
        return self.learner.checkpoint()


class _FixedActor:
    """Deterministic actor from given weights (policy-iteration oracle)."""

    def __init__(self, setup: Setup, spec, weights: AcWeights):
        self.setup, self.spec, self.weights = setup, spec, weights

    def decide(self, n, t, first):
        x = (n - self.setup.n_offset) / self.spec.input_scale
        u = saturate(self.setup.frame, x @ self.weights.w_D) + self.setup.u_offset
        return clip_inside(self.setup.bounds, u)

    def checkpoint(self):
        return {"weights": self.weights.pack().tolist(), "basis_digest": self.spec.digest(),
                "K_V": self.spec.K_V, "K_D": self.spec.K_D,
                "alpha_u": int(self.weights.w_D.shape[1])}


class _Mpc:
    def __init__(self, setup: Setup):
        cfg = setup.config
        if cfg.objective == "setpoint":
            obj = MpcObjective("setpoint", setup.net, setup.steady, setup.Q, setup.R)
        else:
            obj = MpcObjective("tts", setup.net, lambda_bar=cfg.lambda_bar)
        mcfg = MpcConfig(horizon=cfg.mpc_horizon, step_s=cfg.dt_control,
                         iterations=cfg.mpc_iterations, substep_s=cfg.mpc_substep_s)
        forecast = make_demand(cfg.demand.nominal())
        self.ctl = MpcController(setup.net, setup.params, setup.bounds, obj, mcfg, forecast)

    def decide(self, n, t, first):
        return self.ctl(n, t)


class _Static:
    def __init__(self, setup: Setup):
        self.u = static_plan(setup.bounds)

    def decide(self, n, t, first):
        return self.u


def pi_oracle(setup: Setup):
    """Policy-iteration weights for a set-point scenario, started from its initial law."""
    cfg = setup.config
    if setup.steady is None:
        raise ConfigurationError("the policy-iteration oracle needs a set-point objective")
    spec = make_basis(cfg, setup.net.alpha_n)
    pcfg = PiOracleConfig(n_points=cfg.pi_points, box_fraction=cfg.pi_box_fraction,
                          max_iter=cfg.pi_iterations, seed=cfg.seed)
    res = policy_iteration(setup.net, setup.params, setup.steady, spec, setup.Q, setup.R,
                           setup.frame, pcfg, initial_actor(setup, spec))
    return spec, res


def _make_policy(setup: Setup, controller: str):
    if controller == "irl":
        return _IrlPolicy(setup)
    if controller == "pi":
        spec, res = pi_oracle(setup)
        return _FixedActor(setup, spec, res.weights)
    if controller == "mpc":
        return _Mpc(setup)
    if controller == "static":
        return _Static(setup)
    raise ConfigurationError(f"unknown controller {controller!r}; choose from {CONTROLLERS}")


def run_scenario(config: ScenarioConfig, controller: str = "irl") -> RunResult:
    """Closed-loop simulation of one scenario under one controller.

    The plant advances in substeps of ``substep_s``; the learner sees every
    substep, closes a sample each reinforcement interval and updates once per
    control step, right before the next control is computed. A learner
    divergence ends the run early with ``aborted`` set.
    """
    setup = build_setup(config)
    net, params, cfg = setup.net, setup.params, config
    policy = _make_policy(setup, controller)
    is_irl = isinstance(policy, _IrlPolicy)

    h = cfg.substep_s
    per_ctrl = int(round(cfg.dt_control / h))
    per_log = int(round(cfg.log_every_s / h))
    n_ctrl = int(np.ceil(cfg.horizon_s / cfg.dt_control - 1e-9))
    total = int(round(cfg.horizon_s / h))

    st = AccumulationState(np.array(cfg.n0), 0.0)
    if is_irl:
        policy.start(st.n, st.t)
    times = np.empty(total + 1)
    regional = np.empty((total + 1, net.region_count))
    controls = np.empty((total + 1, net.alpha_u))
    times[0], regional[0] = 0.0, net.regional(st.n)
    rows, row_events, events, pending = [], [], [], []
    cpu = []
    aborted, message = False, ""
    u = None
    k = 0

    def log_row(n, t, u_now):
        td = policy.td if is_irl else float("nan")
        rank = policy.rank_ok if is_irl else 0
        rows.append(np.concatenate([[t], n, u_now, [td, rank]]))
        row_events.append(";".join(str(e) for e in pending))
        pending.clear()

    for c in range(n_ctrl):
        tic = time.perf_counter()
        try:
            u = policy.decide(st.n, st.t, c == 0)
        except LearnerDivergence as exc:
            aborted, message = True, str(exc)
            log.error("run aborted at t=%.0f s: %s", st.t, exc)
            break
        cpu.append(time.perf_counter() - tic)
        for _ in range(per_ctrl):
            if k >= total:
                break
            if k % per_log == 0:
                log_row(st.n, st.t, u)
            before = len(events)
            st = step(net, params, st, u, setup.demand, h, events=events)
            pending.extend(events[before:])
            k += 1
            st = AccumulationState(st.n, k * h)
            times[k], regional[k], controls[k - 1] = st.t, net.regional(st.n), u
            if is_irl:
                policy.observe(st.t, u, st.n)
    if u is not None:
        log_row(st.n, st.t, u)
    controls[k] = controls[k - 1] if k else (u if u is not None else 0.0)
    times, regional, controls = times[:k + 1], regional[:k + 1], controls[:k + 1]

    metrics = {
        "controller": controller,
        "scenario": cfg.id,
        "tts_veh_s": total_time_spent(times, regional),
        "tts_control_term": total_time_spent(times, np.zeros(len(times)), cfg.lambda_bar, controls),
        "cpu_per_step_s": float(np.mean(cpu)) if cpu else float("nan"),
        "cpu_per_step_median_s": float(np.median(cpu)) if cpu else float("nan"),
        "clamp_events": len(events),
        "max_regional": float(regional.max()),
        "final_regional": regional[-1].tolist(),
        "aborted": aborted,
    }
    if cfg.objective == "setpoint":
        metrics["settling_s"] = settling_time(times, regional, cfg.n_bar)
    checkpoint = policy.checkpoint() if hasattr(policy, "checkpoint") else None
    if is_irl:
        metrics["updates"] = policy.learner.updates
    return RunResult(cfg, controller, csv_columns(net), np.array(rows), row_events, events,
                     metrics, times, regional, checkpoint, aborted, message)
