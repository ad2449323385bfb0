"""Acceptance suite: one test per criterion, tolerances fixed up front."""
import time

import numpy as np
import pytest

from conftest import acceptance_run, cached_runs
from mfdlab.cli import write_trajectory_csv
from mfdlab.irl import ReplayBuffer, ReplaySample, accumulate_sample, er_update, rank_check, td_error
from mfdlab.mfd import (AccumulationState, MfdParams, RegionNetwork, constant_demand,
                        critical_accumulation, solve_steady_state, step)
from mfdlab.scenarios import build_setup, pi_oracle, scenario_1a

N_JAM = 10000.0
SETTLE_1A_S = 40 * 60
SETTLE_1C_S = 45 * 60
HORIZON_1B_S = 3 * 3600
WALL_1A_S = 60.0
TTS_STATIC_GAIN = 0.20
TTS_MPC_RATIO = 1.10
TD_SHRINK = 3.0
CONV_REL = 1e-4
CONV_UPDATES = 100_000
MONO_TOL = 1e-8


def _settled(res):
    return all(s is not None for s in res.metrics["settling_s"])


def test_c01_steady_state_reproduction():
    tic = time.perf_counter()
    ss = solve_steady_state(RegionNetwork.two_region(), MfdParams.reference(),
                            [3000.0, 3000.0], np.full(4, 1.6))
    elapsed = time.perf_counter() - tic
    print(f"n*={np.round(ss.n_star, 2).tolist()} u*={np.round(ss.u_star, 5).tolist()} "
          f"in {elapsed * 1e3:.1f} ms")
    np.testing.assert_allclose(ss.n_star, [1538.9, 1461.1, 1461.1, 1538.9], atol=0.5)
    np.testing.assert_allclose(ss.u_star, [0.5267, 0.5267], atol=0.001)
    assert elapsed < 1.0


def test_c02_critical_accumulation():
    p = MfdParams.reference()
    reps = 1000
    tic = time.perf_counter()
    for _ in range(reps):
        n_cr = critical_accumulation(p)
    per_call = (time.perf_counter() - tic) / reps
    print(f"n_cr={n_cr:.2f} veh, {per_call * 1e6:.1f} us per call")
    assert abs(n_cr - 3392) <= 1
    assert per_call < 1e-3


@pytest.mark.parametrize("dt", [1.0, 15.0, 30.0])
def test_c03_setpoint_regulation(dt):
    res = acceptance_run("1A", dt=dt)
    st = res.metrics["settling_s"]
    print(f"dt={dt:g}s settling={st} wall={res.metrics['wall_s']:.1f}s")
    assert res.regional[0].tolist() == [1800.0, 3100.0]
    assert _settled(res) and max(st) <= SETTLE_1A_S
    assert res.metrics["wall_s"] < WALL_1A_S


def test_c04_interval_sensitivity():
    dts = [15.0, 20.0, 30.0, 45.0, 60.0, 90.0]
    worst = []
    for dt in dts:
        res = acceptance_run("1B", dt=dt)
        st = res.metrics["settling_s"]
        worst.append(None if None in st else max(st))
    settled = [w for w in worst if w is not None]
    trend = all(b >= a for a, b in zip(settled, settled[1:]))
    print(f"worst-region settling by dt {dict(zip(dts, worst))}; non-decreasing: {trend}")
    assert all(w is not None and w < HORIZON_1B_S for w in worst)


def test_c05_congested_setpoint():
    irl = acceptance_run("1C")
    mpc = acceptance_run("1C", "mpc")
    c_irl, c_mpc = irl.metrics["cpu_per_step_s"], mpc.metrics["cpu_per_step_s"]
    print(f"IRL settling={irl.metrics['settling_s']} cpu/step={c_irl:.2e}s; "
          f"MPC settling={mpc.metrics['settling_s']} cpu/step={c_mpc:.2e}s; "
          f"ratio={c_mpc / c_irl:.0f}")
    assert _settled(irl) and max(irl.metrics["settling_s"]) <= SETTLE_1C_S
    assert _settled(mpc)
    assert c_irl < 10e-3
    assert c_mpc >= 10 * c_irl


def test_c06_tts_ordering():
    lines, ok = [], True
    for case in ("nominal", "noisy", "abrupt"):
        tts = {c: acceptance_run("2", c, case=case).metrics["tts_veh_s"]
               for c in ("irl", "static", "mpc")}
        lines.append(f"{case}: IRL {tts['irl']:.4g} static {tts['static']:.4g} "
                     f"MPC {tts['mpc']:.4g}")
        ok &= tts["irl"] <= (1 - TTS_STATIC_GAIN) * tts["static"]
        ok &= tts["irl"] <= TTS_MPC_RATIO * tts["mpc"]
    print("; ".join(lines))
    assert ok, "; ".join(lines)


def _td_errors(setup, spec, W, X, dt, substep=1.0, fine=0.05):
    """|TD error| of fixed weights on simulated intervals sampled every ``substep``."""
    q = setup.demand(0.0)
    dem = constant_demand(q)
    Wp = W.pack()
    out = []
    for x in X:
        st = AccumulationState(x + setup.n_offset)
        u_err = setup.frame.v_bar - setup.frame.v_under * np.tanh(x / spec.input_scale @ W.w_D)
        states, times = [x], [0.0]
        for k in range(int(round(dt / substep))):
            st = step(setup.net, setup.params, st, u_err + setup.u_offset, dem, substep,
                      max_substep=fine)
            states.append(st.n - setup.n_offset)
            times.append(st.t)
        s = accumulate_sample(spec, W, setup.frame, setup.Q, setup.R, np.array(states),
                              np.tile(u_err, (len(times) - 1, 1)), times)
        out.append(abs(td_error(s, Wp)))
    return np.array(out)


def test_c07_td_error_shrinks_with_interval():
    setup = build_setup(scenario_1a())
    spec, res = pi_oracle(setup)
    rng = np.random.default_rng(0)
    X = res.points[rng.choice(len(res.points), 200, replace=False)]
    e20 = _td_errors(setup, spec, res.weights, X, 20.0).mean()
    e10 = _td_errors(setup, spec, res.weights, X, 10.0).mean()
    print(f"mean |e|: dt=20s {e20:.4g}, dt=10s {e10:.4g}, ratio {e20 / e10:.3f}")
    assert e20 / e10 >= TD_SHRINK


def test_c08_convergence_on_exact_data():
    setup = build_setup(scenario_1a())
    from mfdlab.scenarios import make_basis

    dim = make_basis(setup.config, 4).K_V + 4 * 2
    cfg = setup.config
    rng = np.random.default_rng(0)
    W_true = rng.normal(size=dim)
    buf = ReplayBuffer(cfg.capacity)
    for k in range(cfg.capacity):
        p = rng.normal(size=dim) / np.sqrt(dim)
        buf.push(ReplaySample(p, float(-p @ W_true), float(k), 1.0))
    assert rank_check(buf, dim).satisfied
    W = np.zeros(dim)
    err = [np.linalg.norm(W_true)]
    for k in range(1, CONV_UPDATES + 1):
        W = er_update(W, buf[k % cfg.capacity], buf, cfg.learning_rate(), cfg.dt_control,
                      cfg.batch, rng)
        err.append(np.linalg.norm(W - W_true))
        if err[-1] < CONV_REL * err[0]:
            break
    err = np.array(err)
    print(f"dim={dim}, updates={k}, final relative error {err[-1] / err[0]:.3g}, "
          f"largest step change {np.diff(err).max():.3g}")
    assert np.all(np.diff(err) < 0)
    assert err[-1] < CONV_REL * err[0]


def test_c09_value_iterates_non_increasing():
    setup = build_setup(scenario_1a())
    _, res = pi_oracle(setup)
    V = res.values
    scale = max(np.abs(v).max() for v in V)
    rises = [float((V[k] - V[k - 1]).max()) for k in range(1, len(V))]
    print(f"largest pointwise increase per iteration {np.round(rises, 6).tolist()} "
          f"(value scale {scale:.4g})")
    assert max(rises) <= MONO_TOL * scale


def test_c10_constraint_safety():
    # make sure every acceptance run exists, then inspect all of them
    for dt in (1.0, 15.0, 30.0):
        acceptance_run("1A", dt=dt)
    for dt in (15.0, 20.0, 30.0, 45.0, 60.0, 90.0):
        acceptance_run("1B", dt=dt)
    acceptance_run("1C")
    acceptance_run("1C", "mpc")
    for case in ("nominal", "noisy", "abrupt"):
        for c in ("irl", "static", "mpc"):
            acceptance_run("2", c, case=case)
    problems = []
    for (name, ctl, kw), res in sorted(cached_runs().items(), key=str):
        setup = build_setup(res.config)
        label = f"{name}/{ctl}/{dict(kw)}"
        U = res.rows[:, [res.columns.index(c) for c in res.columns if c.startswith("u_")]]
        if not (np.all(U > setup.bounds.u_min) and np.all(U < setup.bounds.u_max)):
            problems.append(f"{label}: control on or outside bounds")
        if res.regional.min() < 0 or res.regional.max() > N_JAM:
            problems.append(f"{label}: regional accumulation outside [0, n_jam]")
        nominal = res.config.demand.kind in ("constant", "trapezoid")
        if nominal and res.metrics["clamp_events"]:
            problems.append(f"{label}: {res.metrics['clamp_events']} clamp events")
    print(f"{len(cached_runs())} runs checked; " + ("; ".join(problems) or "no violations"))
    assert not problems, "; ".join(problems)


def _csv_bytes(res):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        return write_trajectory_csv(res, Path(d) / "t.csv").read_bytes()


@pytest.mark.parametrize("name,controller,kw", [
    ("1A", "irl", {"dt": 15.0}),
    ("1C", "irl", {}),
    ("2", "irl", {"case": "noisy"}),
    ("2", "static", {"case": "abrupt"}),
], ids=["1A-irl", "1C-irl", "2-noisy-irl", "2-abrupt-static"])
def test_c11_reproducibility(name, controller, kw):
    from mfdlab.scenarios import get_scenario, run_scenario

    first = acceptance_run(name, controller, **kw)
    again = run_scenario(get_scenario(name, **kw), controller)
    a, b = _csv_bytes(first), _csv_bytes(again)
    print(f"{len(a)} bytes, identical: {a == b}")
    assert a == b
