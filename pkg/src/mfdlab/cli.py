"""Command-line front end: run, sweep, compare and preset config files."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .mfd import ConfigurationError
from .scenarios import (CONTROLLERS, RunResult, ScenarioConfig, get_scenario, run_scenario,
                        with_overrides)

log = logging.getLogger("mfdlab")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


# ---------------------------------------------------------------- config files

def load_config(path) -> tuple[ScenarioConfig, str | None]:
    """Parse a run config file: ScenarioConfig fields plus an optional output_dir."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    raw = dict(raw)
    out = raw.pop("output_dir", None)
    if out is not None and not isinstance(out, str):
        raise ConfigurationError("output_dir must be a string")
    return ScenarioConfig.from_dict(raw), out


def config_hash(config: ScenarioConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _out_root(flag: str | None, from_file: str | None) -> Path:
    return Path(flag or from_file or os.environ.get("MFDLAB_OUT") or "mfdlab_runs")


# ---------------------------------------------------------------- artifacts

def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.10g}"


def write_trajectory_csv(result: RunResult, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(result.columns + ["event"])
        rank_col = result.columns.index("rank_ok")
        for row, ev in zip(result.rows, result.row_events):
            cells = [_fmt(v) for v in row]
            cells[rank_col] = str(int(row[rank_col]))
            w.writerow(cells + [ev])
    return path


def _versions() -> dict:
    import matplotlib
    import scipy

    return {"mfdlab": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__}


def write_run(result: RunResult, directory) -> dict:
    """Trajectory CSV, metrics, checkpoint and manifest for one run."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {"trajectory": "trajectory.csv", "metrics": "metrics.json",
             "checkpoint": "checkpoint.json", "manifest": "manifest.json"}
    write_trajectory_csv(result, d / files["trajectory"])
    metrics = dict(result.metrics, message=result.message)
    (d / files["metrics"]).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    ckpt = result.checkpoint or {"weights": None}
    ckpt = dict(ckpt, controller=result.controller)
    (d / files["checkpoint"]).write_text(json.dumps(ckpt) + "\n")
    manifest = {"config": result.config.to_dict(), "config_hash": config_hash(result.config),
                "controller": result.controller, "seed": result.config.seed,
                "versions": _versions(), "artifacts": files}
    (d / files["manifest"]).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return files


def verify_manifest(directory) -> bool:
    """True when the stored config still hashes to the recorded value."""
    m = json.loads((Path(directory) / "manifest.json").read_text())
    return config_hash(ScenarioConfig.from_dict(m["config"])) == m["config_hash"]


def _run_dir(root: Path, config: ScenarioConfig, controller: str, tag: str = "") -> Path:
    name = f"{config.id}_{controller}_seed{config.seed}{tag}"
    return root / name


def _summary(result: RunResult) -> str:
    m = result.metrics
    parts = [f"{result.config.id}/{result.controller}"]
    if "settling_s" in m:
        parts.append("settling " + ", ".join("-" if s is None else f"{s:.0f}s"
                                             for s in m["settling_s"]))
    parts.append(f"TTS {m['tts_veh_s']:.4g} veh s")
    parts.append(f"cpu/step {m['cpu_per_step_s'] * 1e3:.3g} ms")
    if m["clamp_events"]:
        parts.append(f"{m['clamp_events']} clamp events")
    if result.aborted:
        parts.append("ABORTED")
    return " | ".join(parts)


# ---------------------------------------------------------------- commands

def cmd_run(args) -> int:
    try:
        config, out = load_config(args.config)
        if args.seed is not None:
            config = with_overrides(config, seed=args.seed)
            if config.demand.kind == "trapezoid+noise":
                config = with_overrides(config, demand=with_overrides(config.demand,
                                                                      noise_seed=args.seed))
    except ConfigurationError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    try:
        result = run_scenario(config, args.controller)
    except ConfigurationError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    d = _run_dir(_out_root(args.out, out), config, args.controller)
    write_run(result, d)
    if args.plot:
        from .plotting import plot_controls, plot_regional
        plot_regional([result], d / "regional.png", _summary(result))
        plot_controls([result], d / "controls.png")
    print(_summary(result))
    print(f"artifacts in {d}")
    if result.aborted:
        log.error("learner diverged: %s", result.message)
        return EXIT_DIVERGED
    return EXIT_OK


def _parse_values(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"bad --values list {text!r}") from None
    if not vals:
        raise ConfigurationError("--values is empty")
    return vals


def _sweep_config(config: ScenarioConfig, param: str, value: float) -> ScenarioConfig:
    names = set(config.to_dict())
    if param not in names or param == "demand":
        raise ConfigurationError(f"cannot sweep {param!r}")
    current = getattr(config, param)
    value = int(value) if isinstance(current, int) and not isinstance(current, bool) else value
    changes = {param: value}
    # reinforcement interval and control step move together when they start equal
    if param == "dt_reinforce" and config.dt_control == config.dt_reinforce:
        changes["dt_control"] = value
    return with_overrides(config, **changes)


def cmd_sweep(args) -> int:
    try:
        config, out = load_config(args.config)
        values = _parse_values(args.values)
        configs = [_sweep_config(config, args.param, v) for v in values]
    except ConfigurationError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    root = _out_root(args.out, out) / f"sweep_{config.id}_{args.param}"
    root.mkdir(parents=True, exist_ok=True)
    rows, worst = [], []
    for v, cfg in zip(values, configs):
        tag = f"_{args.param}{v:g}"
        try:
            result = run_scenario(cfg, args.controller)
        except Exception as exc:  # a failed sub-run is recorded, the sweep continues
            log.error("run %s=%g failed: %s", args.param, v, exc)
            rows.append({"value": v, "status": f"error: {exc}"})
            worst.append(None)
            continue
        write_run(result, _run_dir(root, cfg, args.controller, tag))
        st = result.metrics.get("settling_s") or []
        rows.append({"value": v, "beta": cfg.learning_rate() if args.controller == "irl" else "",
                     **{f"settling_r{i + 1}_s": "" if s is None else s for i, s in enumerate(st)},
                     "tts_veh_s": result.metrics["tts_veh_s"],
                     "status": "aborted" if result.aborted else "ok"})
        worst.append(None if not st or any(s is None for s in st) else max(st))
        print(f"{args.param}={v:g}: {_summary(result)}")
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with (root / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    settled = [s for s in worst if s is not None]
    trend = all(b >= a for a, b in zip(settled, settled[1:])) if len(settled) > 1 else True
    (root / "summary.json").write_text(json.dumps(
        {"param": args.param, "values": values, "worst_settling_s": worst,
         "all_settled": all(s is not None for s in worst),
         "settling_nondecreasing": trend}, indent=2) + "\n")
    from .plotting import plot_sweep
    plot_sweep(values, worst, root / "settling.png", label=args.param)
    print(f"summary in {root / 'summary.csv'}; settling non-decreasing: {trend}")
    return EXIT_OK


def cmd_compare(args) -> int:
    controllers = [c.strip() for c in (args.controllers or "").split(",") if c.strip()]
    if not controllers:
        log.error("usage error: --controllers needs at least one entry")
        return EXIT_CONFIG
    bad = [c for c in controllers if c not in CONTROLLERS]
    if bad:
        log.error("unknown controllers: %s", ", ".join(bad))
        return EXIT_CONFIG
    try:
        loaded = [load_config(p) for p in args.configs]
    except ConfigurationError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    root = _out_root(args.out, loaded[0][1]) / "compare"
    root.mkdir(parents=True, exist_ok=True)
    from .plotting import plot_controls, plot_regional

    table = []
    for path, (config, _) in zip(args.configs, loaded):
        results = []
        for c in controllers:
            row = {"config": Path(path).name, "scenario": config.id, "controller": c}
            try:
                res = run_scenario(config, c)
            except Exception as exc:
                log.error("%s/%s failed: %s", config.id, c, exc)
                table.append(dict(row, note=f"failed: {exc}"))
                continue
            d = _run_dir(root, config, c, f"_{Path(path).stem}")
            write_run(res, d)
            results.append(res)
            m = res.metrics
            row.update({f"settling_r{i + 1}_s": "" if s is None else s
                        for i, s in enumerate(m.get("settling_s") or [])})
            row.update({"tts_veh_s": m["tts_veh_s"], "cpu_per_step_s": m["cpu_per_step_s"],
                        "clamp_events": m["clamp_events"],
                        "note": "aborted" if res.aborted else ""})
            table.append(row)
            print(_summary(res))
        if results:
            stem = f"{config.id}_{Path(path).stem}"
            plot_regional(results, root / f"{stem}_regional.png", f"scenario {config.id}")
            plot_controls(results, root / f"{stem}_controls.png")
    keys = []
    for r in table:
        keys.extend(k for k in r if k not in keys)
    with (root / "metrics.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    print(f"metrics table in {root / 'metrics.csv'}")
    return EXIT_OK


def cmd_init(args) -> int:
    """Write a preset scenario as an editable config file."""
    kw = {}
    if args.dt is not None:
        kw["dt"] = args.dt
    if args.case is not None:
        kw["case"] = args.case
    try:
        config = get_scenario(args.scenario, **kw)
    except (ConfigurationError, TypeError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    text = json.dumps(config.to_dict(), indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfdlab", description="MFD perimeter-control experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario with one controller")
    r.add_argument("config")
    r.add_argument("--controller", choices=CONTROLLERS, default="irl")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--plot", action="store_true", help="also write PNG figures")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="repeat a run over values of one config field")
    s.add_argument("config")
    s.add_argument("--param", default="dt_reinforce")
    s.add_argument("--values", required=True, help='comma list, e.g. "15,20,30,45,60,90"')
    s.add_argument("--controller", choices=CONTROLLERS, default="irl")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compare", help="cross product of configs and controllers")
    c.add_argument("configs", nargs="+")
    c.add_argument("--controllers", default="irl,mpc")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    i = sub.add_parser("init", help="write a preset scenario config (1A, 1B, 1C, 2)")
    i.add_argument("scenario")
    i.add_argument("--dt", type=float, help="reinforcement interval for 1A/1B")
    i.add_argument("--case", choices=("nominal", "noisy", "abrupt"), help="demand case for 2")
    i.add_argument("-o", "--output")
    i.set_defaults(func=cmd_init)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
