import pytest

from mfdlab.scenarios import get_scenario, run_scenario

_CACHE = {}


def acceptance_run(name, controller="irl", **kw):
    """Run a preset scenario once per session and reuse the result."""
    key = (name, controller, tuple(sorted(kw.items())))
    if key not in _CACHE:
        import time

        tic = time.perf_counter()
        res = run_scenario(get_scenario(name, **kw), controller)
        res.metrics["wall_s"] = time.perf_counter() - tic
        _CACHE[key] = res
    return _CACHE[key]


def cached_runs():
    return dict(_CACHE)


@pytest.fixture(scope="session")
def runner():
    return acceptance_run
