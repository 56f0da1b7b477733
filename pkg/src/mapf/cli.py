"""Command-line runner: ``mapf {run,baseline,oracle,validate} --config PATH``.

The config is a JSON object. Filter settings sit at the top level; data come
either from a ``scenario`` block (simulated) or an ``inputs`` block (a GPS
trace file plus optional named route files). ``bank`` lists model family
declarations ``{"family": name, "params": {...}}``; it may be omitted for
scenario kinds that define their own bank.

Replications run on a process pool (``--workers``); every run draws from its
own seeded substreams so outputs do not depend on the worker count.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from mapf import kernels, mobility, scenarios
from mapf.engine import MapfConfig, run_mapf
from mapf.errors import BankError, ConfigError, InvariantViolation, ParseError, ScheduleError, UnsupportedModel
from mapf.models import ModelBank, TrueModelSchedule, build_model, simulate_truth, switching_model, validate_bank
from mapf.rng import run_rng

log = logging.getLogger("mapf")

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3

# purposes for per-run setup streams
TRUTH_STREAM, SCENARIO_STREAM = 0, 1

FILTER_KEYS = {
    "epsilon": "epsilon",
    "ess_variant": "ess_variant",
    "allocation_policy": "allocation_policy",
    "M_min": "M_min",
    "T_V": "refresh_period",
    "p_r": "refresh_prob",
    "adaptive_refresh": "adaptive_refresh",
    "forced_refresh_times": "forced_refresh_times",
    "global_resampling": "global_resampling",
    "resampling_scheme": "resampling_scheme",
}
TOP_KEYS = set(FILTER_KEYS) | {"seed", "N", "runs", "bank", "priors", "scenario", "inputs", "output"}
SCENARIO_KINDS = ("ts_switching", "param_grid", "linear_gaussian", "discrete_hmm", "mobility_synthetic", "schedule")


def fmt(x):
    """17 significant digits so identical doubles print identically."""
    return format(float(x), ".17g")


# -- config ----------------------------------------------------------------


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    cfg["_base_dir"] = str(Path(path).resolve().parent)
    return cfg


def filter_config(cfg):
    kw = {FILTER_KEYS[k]: v for k, v in cfg.items() if k in FILTER_KEYS}
    if "forced_refresh_times" in kw:
        kw["forced_refresh_times"] = tuple(int(t) for t in kw["forced_refresh_times"])
    try:
        return MapfConfig(**kw)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def check_config(cfg):
    """Raise :class:`ConfigError` on anything that would fail later."""
    unknown = set(cfg) - TOP_KEYS - {"_base_dir"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if ("scenario" in cfg) == ("inputs" in cfg):
        raise ConfigError("config needs exactly one of 'scenario' or 'inputs'")
    for key in ("seed", "N"):
        if key not in cfg:
            raise ConfigError(f"config lacks required key {key!r}")
    if not isinstance(cfg["N"], int) or cfg["N"] < 1:
        raise ConfigError(f"N must be a positive integer, got {cfg['N']!r}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    runs = cfg.get("runs", 1)
    if not isinstance(runs, int) or runs < 1:
        raise ConfigError(f"runs must be a positive integer, got {runs!r}")
    if "scenario" in cfg:
        kind = cfg["scenario"].get("kind")
        if kind not in SCENARIO_KINDS:
            raise ConfigError(f"unknown scenario kind {kind!r}; known: {list(SCENARIO_KINDS)}")
        if kind in ("linear_gaussian", "discrete_hmm", "schedule") and "bank" not in cfg:
            raise ConfigError(f"scenario kind {kind!r} needs a 'bank'")
    elif "trace" not in cfg["inputs"]:
        raise ConfigError("inputs block needs a 'trace' file")
    bank = make_bank(cfg, 0)
    filter_config(cfg).validate(cfg["N"], bank.K)
    return bank


def _decl(cfg, d):
    d = dict(d)
    routes = cfg.get("inputs", {}).get("routes", {})
    params = dict(d.get("params", {}))
    if "route_file" in params and params["route_file"] in routes:
        params["route_file"] = routes[params["route_file"]]
    d["params"] = params
    return build_model(d, base_dir=cfg.get("_base_dir"))


def _bank_from_decls(cfg, decls):
    if not isinstance(decls, list):
        raise ConfigError("'bank' must be a list of model declarations")
    return ModelBank.from_models([_decl(cfg, d) for d in decls], cfg.get("priors"))


def make_scenario(cfg, run):
    """The scenario object for replication ``run`` (param-grid banks are redrawn per run)."""
    sc = dict(cfg["scenario"])
    kind = sc.pop("kind")
    T = int(sc.pop("T", 500))
    if kind == "ts_switching":
        return scenarios.ts_switching_scenario(T=T, **sc)
    if kind == "param_grid":
        rng = run_rng(cfg["seed"], run, SCENARIO_STREAM)
        return scenarios.param_grid_scenario(int(sc.get("K", 5)), sc.get("setting", "S1"), rng, T)
    if kind == "mobility_synthetic":
        return mobility.mobility_scenario(T=T, **sc)
    bank = _bank_from_decls(cfg, cfg["bank"])
    if kind in ("linear_gaussian", "discrete_hmm"):
        # data come from the model named by 'true_model' (1-based, default 1)
        k = int(sc.get("true_model", 1))
        if not 1 <= k <= bank.K:
            raise ConfigError(f"true_model {k} out of range for K={bank.K}")
        gen = _decl(cfg, cfg["bank"][k - 1])
        return scenarios.Scenario(bank, TrueModelSchedule([(1, gen)], labels=[k]), T)
    segs = sc.get("segments")
    if not segs:
        raise ConfigError("schedule scenario needs 'segments'")
    sched = TrueModelSchedule(
        [(int(s["start"]), _decl(cfg, s["model"])) for s in segs],
        labels=[s.get("label") for s in segs] if all("label" in s for s in segs) else None,
    )
    return scenarios.Scenario(bank, sched, T)


def make_bank(cfg, run):
    if "scenario" in cfg:
        if "bank" in cfg:
            bank = _bank_from_decls(cfg, cfg["bank"])
        else:
            bank = make_scenario(cfg, run).bank
    else:
        if "bank" not in cfg:
            raise ConfigError("inputs config needs a 'bank'")
        bank = _bank_from_decls(cfg, cfg["bank"])
    validate_bank(bank)
    return bank


def make_data(cfg, run):
    """``(bank, ticks, observations, true states or None, true labels or None)``."""
    if "scenario" in cfg:
        sc = make_scenario(cfg, run)
        bank = make_bank(cfg, run) if "bank" in cfg else sc.bank
        xs, ys = simulate_truth(sc.schedule, sc.T, run_rng(cfg["seed"], run, TRUTH_STREAM))
        return bank, np.arange(1, sc.T + 1), list(ys), xs, sc.true_labels()
    trace_path = Path(cfg["inputs"]["trace"])
    if not trace_path.is_absolute():
        trace_path = Path(cfg["_base_dir"]) / trace_path
    trace = mobility.load_trace(trace_path)
    obs, ticks = trace.observations()
    labels = None
    if trace.mode is not None:
        by_tick = dict(zip(trace.t.tolist(), trace.mode.tolist()))
        labels = np.array([by_tick.get(int(t), 0) for t in ticks])
    return make_bank(cfg, run), ticks, obs, None, labels


# -- execution -------------------------------------------------------------


def _single(bank, k=None, schedule=None):
    """A one-model bank: model ``k`` of ``bank``, or a switching composition."""
    if schedule is not None:
        model = switching_model([(s, bank.models[j - 1]) for s, j in schedule])
        model.state_dim, model.obs_dim = bank.state_dim, bank.obs_dim
    else:
        model = dataclasses.replace(bank.models[k - 1])
    return ModelBank.from_models([model], [1.0])


def parse_schedule(text):
    """``"1:1,251:2"`` -> ``[(1, 1), (251, 2)]``."""
    try:
        out = [tuple(int(v) for v in part.split(":")) for part in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad schedule {text!r}; expected start:model,...") from None
    if any(len(p) != 2 for p in out):
        raise ConfigError(f"bad schedule {text!r}; expected start:model,...")
    return out


def execute_run(cfg, run, mode="run", model=None, schedule=None):
    """One replication; returns ``(run, csv rows, per-run summary)``."""
    bank, ticks, obs, xs, labels = make_data(cfg, run)
    if mode == "baseline":
        if schedule is not None:
            for _, j in schedule:
                if not 1 <= j <= bank.K:
                    raise ConfigError(f"schedule model {j} out of range for K={bank.K}")
        elif not 1 <= model <= bank.K:
            raise ConfigError(f"model index {model} out of range for K={bank.K}")
        bank = _single(bank, model, schedule)
    fcfg = filter_config(cfg)
    t0 = time.perf_counter()
    tr = run_mapf(bank, obs, cfg["N"], fcfg, seed=cfg["seed"], run=run)
    wall = time.perf_counter() - t0

    rows = []
    for i in range(len(ticks)):
        fields = [str(run), str(int(ticks[i]))]
        fields += [fmt(v) for v in tr.estimates[i]]
        fields += [fmt(v) for v in tr.rho_bar[i]]
        fields += [str(int(m)) for m in tr.M[i]]
        fields += [fmt(tr.ess[i]), str(int(tr.resampled[i])), str(int(tr.refreshed[i])), str(int(tr.map_model[i]))]
        fields += [str(int(v)) for v in tr.lost[i]]
        rows.append(",".join(fields))

    summary = {"run": run, "T": len(ticks), "wall_time_s": wall}
    if xs is not None:
        m = scenarios.metrics(tr.estimates, tr.map_model, xs, labels if mode == "run" else None)
        summary["mse"] = m.mse
        summary["match_pct"] = m.match_pct
    elif labels is not None and mode == "run":
        summary["mse"] = None
        known = labels > 0
        summary["match_pct"] = float(100.0 * np.mean(tr.map_model[known] == labels[known])) if known.any() else None
    summary["resample_count"] = int(tr.resampled.sum())
    summary["refresh_count"] = int(tr.refreshed.sum())
    return run, rows, summary


def _execute(args):
    return execute_run(*args)


def csv_header(K, d):
    cols = ["run", "t"] + [f"est_{j + 1}" for j in range(d)]
    cols += [f"rho_{k + 1}" for k in range(K)] + [f"M_{k + 1}" for k in range(K)]
    cols += ["ess", "resampled", "refreshed", "map_model"] + [f"lost_{k + 1}" for k in range(K)]
    return ",".join(cols)


def _aggregate(per_run):
    agg = {}
    for key in ("mse", "match_pct"):
        vals = [r[key] for r in per_run if r.get(key) is not None]
        if vals:
            agg[f"{key}_mean"] = float(np.mean(vals))
            agg[f"{key}_median"] = float(np.median(vals))
    return agg


def run_all(cfg, out, workers=1, mode="run", model=None, schedule=None):
    """Run every replication and write ``steps.csv`` and ``summary.json`` into ``out``."""
    bank = check_config(cfg)
    K = 1 if mode == "baseline" else bank.K
    runs = cfg.get("runs", 1)
    jobs = [(cfg, r, mode, model, schedule) for r in range(runs)]
    t0 = time.perf_counter()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    per_run = []
    with open(out / "steps.csv", "w", newline="\n") as fh:
        fh.write(csv_header(K, bank.state_dim) + "\n")
        if workers > 1 and runs > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                # map preserves submission order, so the writer sees runs in order
                for _, rows, s in ex.map(_execute, jobs):
                    fh.write("\n".join(rows) + "\n")
                    per_run.append(s)
        else:
            for job in jobs:
                _, rows, s = _execute(job)
                fh.write("\n".join(rows) + "\n")
                per_run.append(s)
    summary = {
        "mode": mode,
        "model": model,
        "schedule": schedule,
        "runs": per_run,
        "aggregate": _aggregate(per_run),
        "wall_time_s": time.perf_counter() - t0,
        "backend": kernels.BACKEND,
        "config": {k: v for k, v in cfg.items() if not k.startswith("_")},
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, default=_json_default)
    return summary


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def oracle_all(cfg, out, kind):
    """Exact evidences (``kalman``) or model posteriors (``hmm``) for every replication."""
    check_config(cfg)
    result = {"kind": kind, "runs": []}
    for r in range(cfg.get("runs", 1)):
        bank, _, obs, _, _ = make_data(cfg, r)
        ys = np.array(obs)
        if kind == "kalman":
            res = [scenarios.kalman_evidence(m, ys) for m in bank.models]
            logZ = np.array([x.log_evidence for x in res])
            a = logZ + bank.log_priors
            post = np.exp(a - a.max())
            result["runs"].append({
                "run": r,
                "log_evidence": logZ.tolist(),
                "log_evidence_steps": [x.log_evidence_steps.tolist() for x in res],
                "posterior": (post / post.sum()).tolist(),
            })
        elif kind == "hmm":
            post = scenarios.hmm_model_posterior(bank, ys)
            result["runs"].append({"run": r, "log_evidence": post.log_evidence.tolist(), "posterior": post.posterior.tolist()})
        else:
            raise ConfigError(f"unknown oracle kind {kind!r}; use kalman or hmm")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "oracle.json", "w") as fh:
        json.dump(result, fh, indent=2)
    return result


# -- entry point -----------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="mapf", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="JSON run config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory (default: config 'output' or ./out)")
    common.add_argument("--workers", type=int, default=1, metavar="N", help="parallel replications")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run MAPF over the configured data")
    b = sub.add_parser("baseline", parents=[common], help="single filter with all N particles")
    g = b.add_mutually_exclusive_group(required=True)
    g.add_argument("--model", type=int, help="1-based bank index")
    g.add_argument("--schedule", help="switching baseline, e.g. 1:1,251:2")
    o = sub.add_parser("oracle", parents=[common], help="exact reference values")
    o.add_argument("--kind", choices=("kalman", "hmm"), required=True)
    sub.add_parser("validate", parents=[common], help="check the config and exit")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        out = args.out or cfg.get("output") or "out"
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.command == "validate":
            bank = check_config(cfg)
            print(f"ok: K={bank.K}, N={cfg['N']}, runs={cfg.get('runs', 1)}")
        elif args.command == "run":
            s = run_all(cfg, out, args.workers)
            log.info("aggregate %s", s["aggregate"])
        elif args.command == "baseline":
            sched = parse_schedule(args.schedule) if args.schedule else None
            run_all(cfg, out, args.workers, mode="baseline", model=args.model, schedule=sched)
        elif args.command == "oracle":
            oracle_all(cfg, out, args.kind)
    except (ConfigError, BankError, ScheduleError, UnsupportedModel) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError, InvariantViolation) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
